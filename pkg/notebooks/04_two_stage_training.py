"""
Two-stage training on synthetic tissue
======================================

Pretrain a tiny UNet as a noise predictor on unlabeled patches, swap in a
segmentation head, fine-tune on the labeled split and draw a few samples.
The settings are shrunk so the whole script runs in about a minute.
"""

import tempfile
from pathlib import Path

from diffseg.data import write_synth_dataset
from diffseg.pipeline import load_config, run_evaluate, run_finetune, run_pretrain, run_sample

work = Path(tempfile.mkdtemp())
write_synth_dataset(work / "data", 24, seed=0, patch_size=32, stride=32)
manifest = str(work / "data" / "manifest.txt")
common = dict(manifest=manifest, preset="tiny", T=200, seed=0)

# stage 1: unlabeled patches, P2-weighted noise prediction
pre = run_pretrain(load_config(stage="pretrain", epochs=3, lr=1e-3,
                               out_dir=str(work / "pretrain"), **common))
print("pretraining loss per epoch:", [round(v, 4) for v in pre.epoch_losses])

# stage 2: replace the output projection and train with SS + focal loss
ft = run_finetune(load_config(stage="finetune", epochs=3, lr=1e-3, loss="ssfl",
                              checkpoint_in=str(pre.checkpoint),
                              out_dir=str(work / "finetune"), **common))
print("best epoch", ft.best_epoch, "test metrics",
      {k: round(ft.metrics[k], 4) for k in ("accuracy", "f1")})

# the saved fine-tuned checkpoint can be scored again on its own
print("re-evaluated:", round(run_evaluate(load_config(
    stage="evaluate", checkpoint_in=str(ft.checkpoint), out_dir=str(work / "eval"),
    **common))["f1"], 4))

# the pretrained noise predictor is also a generator
files = run_sample(load_config(stage="sample", checkpoint_in=str(pre.checkpoint), n_samples=2,
                               out_dir=str(work / "samples"), **common))
print("samples written:", [f.name for f in files])
print("outputs under", work)
