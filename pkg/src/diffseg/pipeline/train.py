"""Two-stage protocol: diffusion pretraining, head swap, supervised fine-tuning."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diffusion
from ..data import DatasetManifest, LabeledPatch, augment
from ..data.io import write_image, write_mask
from ..errors import ConfigError, UsageError
from ..gradcore import Adam, Tensor, no_grad, softmax_channel
from ..gradcore import checkpoint as ckpt_io
from ..schedule import NoiseSchedule, build_linear_schedule
from ..seglosses import ConfusionMatrix, segmentation_loss
from ..unet import PRETRAIN, SEGMENTATION, UNetConfig, UNetModel, preset_config
from .config import SCHEDULE_KEYS, RunConfig
from .reporting import append_csv, metrics_row, write_csv, write_curve_svg

log = logging.getLogger(__name__)

# stream identifiers for derived random generators
_INIT, _PRETRAIN, _FINETUNE, _HEAD, _SAMPLE = 1, 2, 3, 4, 5


def derived_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def _digest(seed: int, *keys: int) -> str:
    return hashlib.sha256(json.dumps([seed, *keys]).encode()).hexdigest()[:16]


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    path: Path
    stage: str
    epoch: int
    model_config: dict
    schedule: dict
    metadata: dict = field(default_factory=dict)


def quantize(arr: np.ndarray) -> np.ndarray:
    """Round to float32 precision (the storage precision) in place."""
    arr[...] = arr.astype(np.float32)
    return arr


def save_checkpoint(path, model: UNetModel, *, stage: str, epoch: int, schedule: dict,
                    optimizer: Adam | None = None, extra: dict | None = None) -> Checkpoint:
    tensors = {f"param/{n}": p.data for n, p in model.named_parameters()}
    meta = {"format": "diffseg", "stage": stage, "epoch": epoch, "mode": model.mode,
            "model": model.config.to_dict(), "schedule": schedule}
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        st = optimizer.state
        meta["adam"] = {"step": st.step, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
                        "lr": optimizer.lr}
        if st.m:
            tensors.update({f"adam.m/{n}": m for n, m in zip(names, st.m)})
            tensors.update({f"adam.v/{n}": v for n, v in zip(names, st.v)})
    meta.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt_io.save(path, tensors, meta)
    return Checkpoint(path, stage, epoch, meta["model"], schedule, meta)


def load_checkpoint(path) -> tuple[UNetModel, dict, dict[str, np.ndarray]]:
    """Rebuild the model stored in ``path``; returns (model, metadata, raw tensors)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    tensors, meta = ckpt_io.load(path)
    config = UNetConfig.from_dict(meta["model"])
    model = UNetModel(config, np.random.default_rng(0))
    if meta["mode"] == SEGMENTATION:
        model.swap_to_segmentation_head(config.num_classes, np.random.default_rng(0))
    params = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(params)
    return model, meta, tensors


def _restore_optimizer(opt: Adam, model: UNetModel, meta: dict, tensors: dict) -> None:
    adam = meta.get("adam")
    if not adam:
        return
    st = opt.state
    st.step, st.beta1, st.beta2, st.eps = adam["step"], adam["beta1"], adam["beta2"], adam["eps"]
    names = [n for n, _ in model.named_parameters()]
    if f"adam.m/{names[0]}" in tensors:
        st.m = [tensors[f"adam.m/{n}"].astype(np.float64) for n in names]
        st.v = [tensors[f"adam.v/{n}"].astype(np.float64) for n in names]


def _schedule_params(cfg: RunConfig) -> dict:
    return {k: getattr(cfg, k) for k in SCHEDULE_KEYS}


def schedule_from_params(p: dict) -> NoiseSchedule:
    return build_linear_schedule(p["T"], p["beta_start"], p["beta_end"], p["p2_k"], p["p2_gamma"])


# -- helpers ----------------------------------------------------------------

def _load_manifest(cfg: RunConfig) -> DatasetManifest:
    if not cfg.manifest:
        raise ConfigError("manifest: a dataset manifest path is required")
    return DatasetManifest.read(cfg.manifest)


def _limit(patches: list, n: int) -> list:
    return patches[:n] if n > 0 else patches


def _batches(n: int, batch_size: int, order: np.ndarray):
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _maybe_augment(cfg: RunConfig, patch: LabeledPatch, stage: int, epoch: int,
                   index: int) -> LabeledPatch:
    # one stream per (seed, epoch, patch index): independent of batch order and workers
    if not cfg.augment:
        return patch
    return augment(patch, derived_rng(cfg.seed, stage, epoch, 1 + index))


def _new_model(cfg: RunConfig, in_channels: int) -> UNetModel:
    config = preset_config(cfg.preset, in_channels=in_channels, num_classes=cfg.num_classes,
                           attention_levels=cfg.attention(), head_scope=cfg.head_scope)
    return UNetModel(config, derived_rng(cfg.seed, _INIT))


# -- pretraining --------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Path
    epoch_losses: list[float]
    model: UNetModel


def run_pretrain(cfg: RunConfig) -> PretrainResult:
    """Train the noise-prediction UNet on the unlabeled split.

    Parameters and Adam moments are rounded to float32 after every epoch, the
    precision at which they are checkpointed, so resuming from any epoch
    checkpoint continues bit-for-bit like an uninterrupted run.
    """
    manifest = _load_manifest(cfg)
    patches = _limit(manifest.load_patches("unlabeled"), cfg.max_train_patches)
    if not patches:
        raise ConfigError("the manifest has no unlabeled patches for pretraining")
    out = cfg.output_dir()
    sched_params = _schedule_params(cfg)
    schedule = schedule_from_params(sched_params)

    history: list[float] = []
    start = 0
    if cfg.checkpoint_in:
        model, meta, tensors = load_checkpoint(cfg.checkpoint_in)
        if meta["stage"] != "pretrain":
            raise UsageError("can only resume pretraining from a pretrain checkpoint")
        if meta["schedule"] != sched_params:
            raise ConfigError(f"schedule {sched_params} differs from checkpoint {meta['schedule']}")
        start, history = meta["epoch"], list(meta.get("history", []))
        opt = Adam(model.parameters(), lr=cfg.lr)
        _restore_optimizer(opt, model, meta, tensors)
    else:
        model = _new_model(cfg, patches[0].image.shape[0])
        opt = Adam(model.parameters(), lr=cfg.lr)

    ckpt = None
    for epoch in range(start, cfg.epochs):
        rng = derived_rng(cfg.seed, _PRETRAIN, epoch)
        order = rng.permutation(len(patches))
        losses = []
        for idx in _batches(len(patches), cfg.batch_size, order):
            chosen = [_maybe_augment(cfg, patches[i], _PRETRAIN, epoch, i) for i in idx]
            x0 = np.stack([p.image for p in chosen])
            losses.append(diffusion.pretrain_step(model, x0, schedule, rng) * len(idx))
            opt.step()
        history.append(float(sum(losses) / len(patches)))
        log.info("pretrain %s epoch %d/%d loss %.5f", cfg.run_id, epoch + 1, cfg.epochs,
                 history[-1])
        for p in model.parameters():
            quantize(p.data)
        for arr in opt.state.m + opt.state.v:
            quantize(arr)
        ckpt = save_checkpoint(out / "checkpoints" / f"pretrain_epoch_{epoch + 1:04d}.ckpt",
                               model, stage="pretrain", epoch=epoch + 1, schedule=sched_params,
                               optimizer=opt,
                               extra={"history": history, "run_id": cfg.run_id, "seed": cfg.seed,
                                      "patch_size": manifest.patch_size,
                                      "rng_digest": _digest(cfg.seed, _PRETRAIN, epoch)})

    write_csv(out / "pretrain_loss.csv",
              [{"epoch": i + 1, "mean_loss": v} for i, v in enumerate(history)])
    write_curve_svg(out / "pretrain_loss.svg", {"P2 loss": history}, f"pretrain {cfg.run_id}")
    final = Path(cfg.checkpoint_out) if cfg.checkpoint_out else out / "pretrain.ckpt"
    if ckpt is None:
        raise ConfigError(f"nothing to train: checkpoint already at epoch {start}")
    final.parent.mkdir(parents=True, exist_ok=True)
    final.write_bytes(ckpt.path.read_bytes())
    return PretrainResult(final, history, model)


# -- fine-tuning and evaluation ---------------------------------------------

def _stack(patches: list[LabeledPatch]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.image for p in patches]), np.stack([p.mask for p in patches])


def predict_probs(model: UNetModel, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    with no_grad():
        return np.concatenate([softmax_channel(model(Tensor(images[i:i + batch_size]))).data
                               for i in range(0, len(images), batch_size)])


def evaluate_model(model: UNetModel, patches: list[LabeledPatch], batch_size: int = 8) -> dict:
    images, masks = _stack(patches)
    cm = ConfusionMatrix(masks.shape[1])
    cm.update(masks, predict_probs(model, images, batch_size))
    return cm.metrics()


@dataclass
class FinetuneResult:
    checkpoint: Path
    metrics: dict
    history: list[dict]
    model: UNetModel
    best_epoch: int


def prepare_finetune_model(cfg: RunConfig, in_channels: int) -> UNetModel:
    """Pretrained (or fresh, with ``random_init``) backbone with a new segmentation head."""
    if cfg.random_init:
        model = _new_model(cfg, in_channels)
    else:
        if not cfg.checkpoint_in:
            raise ConfigError("checkpoint_in: fine-tuning needs a pretrain checkpoint "
                              "(or random_init = true)")
        model, meta, _ = load_checkpoint(cfg.checkpoint_in)
        if meta["stage"] != "pretrain":
            raise UsageError("fine-tuning must start from a pretrain checkpoint")
        model.config.head_scope = cfg.head_scope
    model.swap_to_segmentation_head(cfg.num_classes, derived_rng(cfg.seed, _HEAD))
    return model


def run_finetune(cfg: RunConfig) -> FinetuneResult:
    manifest = _load_manifest(cfg)
    if manifest.num_classes != cfg.num_classes:
        raise ConfigError(f"num_classes: config says {cfg.num_classes} but the dataset has "
                          f"{manifest.num_classes}")
    train = _limit(manifest.load_patches("train"), cfg.max_train_patches)
    test = _limit(manifest.load_patches("test"), cfg.max_test_patches)
    if not train or not test:
        raise ConfigError("fine-tuning needs non-empty train and test splits")
    select = test
    if cfg.selection == "validation":
        select = manifest.load_patches("validation", stride=manifest.patch_size)
        if not select:
            raise ConfigError("selection = validation but the manifest has no validation split")

    model = prepare_finetune_model(cfg, train[0].image.shape[0])
    opt = Adam(model.parameters(), lr=cfg.lr)
    loss_cfg = cfg.loss_config()
    out = cfg.output_dir()

    history = []
    best = (-1.0, 0, None)
    for epoch in range(cfg.epochs):
        rng = derived_rng(cfg.seed, _FINETUNE, epoch)
        order = rng.permutation(len(train))
        total = 0.0
        for idx in _batches(len(train), cfg.batch_size, order):
            chosen = [_maybe_augment(cfg, train[i], _FINETUNE, epoch, i) for i in idx]
            x, y = _stack(chosen)
            probs = softmax_channel(model(Tensor(x)))
            loss = segmentation_loss(cfg.loss, y, probs, loss_cfg)
            model.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sel = evaluate_model(model, select, cfg.batch_size)
        history.append({"epoch": epoch + 1, "loss": total / len(train), "select_f1": sel["f1"]})
        log.info("finetune %s epoch %d/%d loss %.5f f1 %.4f", cfg.run_id, epoch + 1, cfg.epochs,
                 history[-1]["loss"], sel["f1"])
        if sel["f1"] > best[0]:
            best = (sel["f1"], epoch + 1, {k: v.copy() for k, v in model.state_dict().items()})

    model.load_state_dict(best[2])
    for p in model.parameters():
        quantize(p.data)
    metrics = evaluate_model(model, test, cfg.batch_size)
    final = Path(cfg.checkpoint_out) if cfg.checkpoint_out else out / "finetune_best.ckpt"
    save_checkpoint(final, model, stage="finetune", epoch=best[1],
                    schedule=_schedule_params(cfg),
                    extra={"run_id": cfg.run_id, "seed": cfg.seed, "selection": cfg.selection,
                           "patch_size": manifest.patch_size, "averaging": "macro",
                           "loss": cfg.loss, "lambda_fl": cfg.lambda_fl,
                           "random_init": cfg.random_init})
    write_csv(out / "finetune_history.csv", history)
    write_curve_svg(out / "finetune_curve.svg",
                    {"loss": [h["loss"] for h in history],
                     "F1": [h["select_f1"] for h in history]}, f"finetune {cfg.run_id}")
    if cfg.metrics_csv:
        append_csv(cfg.metrics_csv, metrics_row(cfg.run_id, "test", metrics, epoch=best[1],
                                                selection=cfg.selection, loss=cfg.loss,
                                                lambda_fl=cfg.lambda_fl))
    return FinetuneResult(final, metrics, history, model, best[1])


def run_evaluate(cfg: RunConfig) -> dict:
    if not cfg.checkpoint_in:
        raise ConfigError("checkpoint_in: evaluation needs a segmentation checkpoint")
    model, meta, _ = load_checkpoint(cfg.checkpoint_in)
    if model.mode != SEGMENTATION:
        raise UsageError("evaluation needs a fine-tuned (segmentation) checkpoint")
    manifest = _load_manifest(cfg)
    test = _limit(manifest.load_patches("test"), cfg.max_test_patches)
    if not test:
        raise ConfigError("the manifest has no test patches")
    images, masks = _stack(test)
    probs = predict_probs(model, images, cfg.batch_size)
    cm = ConfusionMatrix(masks.shape[1])
    cm.update(masks, probs)
    metrics = cm.metrics()
    if cfg.metrics_csv:
        append_csv(cfg.metrics_csv, metrics_row(cfg.run_id, "test", metrics,
                                                epoch=meta.get("epoch", 0),
                                                selection=meta.get("selection", ""),
                                                loss=meta.get("loss", ""),
                                                lambda_fl=meta.get("lambda_fl", "")))
    if cfg.save_predictions:
        pred_dir = cfg.output_dir() / "predictions"
        pred_dir.mkdir(parents=True, exist_ok=True)
        for i, (patch, p) in enumerate(zip(test, probs)):
            write_mask(pred_dir / f"pred_{i:04d}.png", p.argmax(axis=0))
            write_image(pred_dir / f"image_{i:04d}.png", patch.image.transpose(1, 2, 0))
    return metrics


# -- sampling ----------------------------------------------------------------

def run_sample(cfg: RunConfig) -> list[Path]:
    if not cfg.checkpoint_in:
        raise ConfigError("checkpoint_in: sampling needs a pretrain checkpoint")
    model, meta, _ = load_checkpoint(cfg.checkpoint_in)
    if model.mode != PRETRAIN:
        raise UsageError("checkpoint carries a segmentation head; sampling needs the noise head")
    sched = meta["schedule"]
    clash = {k: (getattr(cfg, k), sched[k]) for k in SCHEDULE_KEYS
             if k in cfg.explicit and getattr(cfg, k) != sched[k]}
    if clash:
        raise ConfigError(f"schedule parameters differ from the checkpoint: {clash}")
    schedule = schedule_from_params(sched)
    rng = derived_rng(cfg.seed, _SAMPLE)
    images = diffusion.sample(model, cfg.n_samples, schedule, rng, size=meta["patch_size"],
                              batch_size=max(cfg.batch_size, cfg.n_samples))
    out = cfg.output_dir() / "samples"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = out / f"sample_{i:03d}.png"
        write_image(path, img.transpose(1, 2, 0))
        paths.append(path)
    manifest = {"seed": cfg.seed, "n": cfg.n_samples, "checkpoint": str(cfg.checkpoint_in),
                "files": [p.name for p in paths], **sched}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    np.save(out / "samples.npy", images.astype(np.float32))
    return paths


# -- sweeps -----------------------------------------------------------------

PRETRAIN_KEYS = set(SCHEDULE_KEYS)


def run_sweep(cfg: RunConfig, param: str, values: list) -> list[dict]:
    """One fine-tuning run (and metrics row) per value of ``param``.

    Sweeping a schedule parameter re-runs pretraining for each value first.
    """
    from .config import parse_value

    results = []
    for raw in values:
        value = parse_value(param, raw) if isinstance(raw, str) else raw
        tag = f"{cfg.run_id}_{param}={value}"
        run_cfg = cfg.replace(**{param: value}).replace(
            run_id=tag, out_dir=str(cfg.output_dir() / tag), checkpoint_out="")
        if param in PRETRAIN_KEYS and not cfg.random_init:
            pre = run_pretrain(run_cfg.replace(stage="pretrain", checkpoint_in=""))
            run_cfg = run_cfg.replace(checkpoint_in=str(pre.checkpoint))
        res = run_finetune(run_cfg.replace(stage="finetune"))
        results.append({"run_id": tag, param: value, **{k: res.metrics[k] for k in
                                                          ("accuracy", "precision", "recall", "f1")}})
    return results
