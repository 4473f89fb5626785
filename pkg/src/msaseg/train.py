"""Training, evaluation, ablation and prediction drivers."""
from __future__ import annotations

import dataclasses
import logging
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import backward, finite_diff_check
from .data import colorize_mask, default_palette, load_dataset, split_indices
from .losses import (accumulate_confusion, downsample_labels, format_keyvalue, format_table, metrics_report,
                     predict_labels, total_loss)
from .model import (Ablation, BackboneConfig, ModelConfig, ScaleStreamConfig, init_params, model_forward,
                    param_group)
from .tensor import Tensor, bilinear_resize

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scales: tuple[float, ...] = (1.0, 0.5)
    dilations: tuple[int, ...] = (2, 12)
    multi_stage: bool = True
    diverse_dilations: bool = True
    location_attention: str = "attention"
    extra_branch: bool = True
    recalib_mode: str = "multiply"
    base_lr: float = 0.01
    power: float = 0.9
    max_iter: int = 2000
    batch_size: int = 8
    decoder_lr_multiplier: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    widths: tuple[int, ...] = (16, 32, 64)
    scale_channels: int = 32
    head_hidden: int = 64
    n_class: int = 5
    checkpoint_every: int = 500
    data: str = "data"
    checkpoint: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.base_lr >= 0:
            raise ConfigError("base_lr must be non-negative")
        if not self.power > 0:
            raise ConfigError("power must be positive")
        if self.max_iter < 1 or self.batch_size < 1:
            raise ConfigError("max_iter and batch_size must be at least 1")
        if self.location_attention != "attention" and self.extra_branch:
            raise ConfigError("pooling merges exclude extra_branch")
        if len(self.dilations) != len(self.scales):
            raise ConfigError("need one dilation per scale")

    def ablation(self) -> Ablation:
        return Ablation(self.multi_stage, self.diverse_dilations, self.location_attention,
                        self.extra_branch, self.recalib_mode)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            BackboneConfig(widths=tuple(self.widths), n_class=self.n_class),
            ScaleStreamConfig(tuple(self.scales), tuple(self.dilations), self.scale_channels, self.head_hidden),
        )

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    # -- flat key = value text -------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
        base = base or cls()
        types = {f.name: f for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in pairs.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(getattr(base, key), raw.strip(), key)
        try:
            return dataclasses.replace(base, **changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _coerce(default, raw: str, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.split(",") if x.strip())
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    pairs = {}
    if path:
        with open(path, encoding="utf-8") as f:
            pairs.update(parse_config_text(f.read()))
    pairs.update(overrides or {})
    return RunConfig.from_pairs(pairs)


# -- schedule & optimiser ----------------------------------------------------

def poly_lr(base_lr: float, iter: int, max_iter: int, power: float = 0.9) -> float:
    """base_lr * (1 - iter / max_iter) ** power, clamped to 0 past the end."""
    if iter > max_iter:
        warnings.warn(f"iteration {iter} is past max_iter {max_iter}; learning rate clamped to 0")
        return 0.0
    return base_lr * (1.0 - iter / max_iter) ** power


def param_lr(config: RunConfig, name: str, iteration: int) -> float:
    """Poly-schedule rate for one parameter; decoder parameters get the multiplier."""
    lr = poly_lr(config.base_lr, iteration, config.max_iter, config.power)
    return lr * config.decoder_lr_multiplier if param_group(name) == "decoder" else lr


def batch_indices(pool: list[int], batch_size: int, seed: int, iteration: int) -> list[int]:
    """Samples for one iteration, from a per-epoch permutation keyed on (seed, epoch).

    Depends only on the iteration number, so a resumed run draws the same
    batches as an uninterrupted one.
    """
    n = len(pool)
    out = []
    for k in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch, pos = divmod(k, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(pool[perm[pos]])
    return out


@dataclass
class TrainState:
    iteration: int
    params: dict[str, Tensor]
    momentum: dict[str, np.ndarray]
    log_rows: list = field(default_factory=list)

    def to_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for name, v in self.momentum.items():
            out[f"momentum/{name}"] = Tensor(v, dtype=np.float32)
        out["state/iteration"] = Tensor(np.array([self.iteration]), dtype=np.float32)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor]) -> TrainState:
        params = {k: v for k, v in tensors.items() if "/" not in k}
        momentum = {k.split("/", 1)[1]: v.numpy() for k, v in tensors.items() if k.startswith("momentum/")}
        it = int(tensors["state/iteration"].item()) if "state/iteration" in tensors else 0
        for name in params:
            momentum.setdefault(name, np.zeros(params[name].shape, dtype=np.float32))
        return cls(it, params, momentum)


def log_header(n_scales: int) -> str:
    return ",".join(["iter", "lr", "loss_total", "loss_final"] + [f"loss_s{k + 1}" for k in range(n_scales)])


def _format_row(row) -> str:
    it, lr, *losses = row
    return ",".join([str(it), repr(lr)] + [repr(v) for v in losses])


def train_step(state: TrainState, config: RunConfig, images: np.ndarray, labels: np.ndarray) -> tuple:
    mcfg, abl = config.model_config(), config.ablation()
    out = model_forward(state.params, Tensor(images), mcfg, abl)
    total, terms = total_loss(out.tape, out.scores, out.final, labels)
    if not math.isfinite(total.value.item()):
        bad = out.tape.first_non_finite()
        where = f"node #{bad.index} ({bad.op}{', ' + bad.name if bad.name else ''})" if bad else "loss"
        raise NumericalError(f"non-finite loss at iteration {state.iteration}; first non-finite tensor: {where}")
    grads = backward(out.tape, total)
    lr = poly_lr(config.base_lr, state.iteration, config.max_iter, config.power)
    for name, p in state.params.items():
        g = grads[name].data
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name} at iteration {state.iteration}")
        step_lr = np.float32(param_lr(config, name, state.iteration))
        v = state.momentum[name]
        v *= np.float32(config.momentum)
        v += g
        if config.weight_decay:
            v += np.float32(config.weight_decay) * p.data
        state.params[name] = Tensor(p.data - step_lr * v, dtype=np.float32)
    row = (state.iteration, lr, total.value.item(), *[t.value.item() for t in terms])
    state.log_rows.append(row)
    state.iteration += 1
    return row


def init_state(config: RunConfig) -> TrainState:
    params = init_params(config.model_config(), config.ablation(), seed=config.seed)
    return TrainState(0, params, {k: np.zeros(v.shape, dtype=np.float32) for k, v in params.items()})


def train(config: RunConfig, out_dir: str | None = None, resume: TrainState | None = None,
          stop_at: int | None = None, dataset=None) -> TrainState:
    """Run SGD with the poly schedule from ``resume`` (or a fresh init) up to
    ``stop_at`` (default ``max_iter``).

    Writes ``train_log.csv``, ``run.cfg``, periodic ``ckpt_XXXXXX.msat`` and
    the final ``model.msat`` into ``out_dir`` when given.
    """
    images, labels, meta = dataset if dataset is not None else load_dataset(config.data)
    if meta.get("nClass", config.n_class) != config.n_class:
        raise ConfigError(f"dataset has {meta['nClass']} classes but config n_class={config.n_class}")
    train_idx, _ = split_indices(len(images))
    state = resume or init_state(config)
    stop = config.max_iter if stop_at is None else min(stop_at, config.max_iter)
    csv = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "run.cfg"), "w", encoding="utf-8") as f:
            f.write(config.to_text())
        csv_path = os.path.join(out_dir, "train_log.csv")
        fresh = state.iteration == 0 or not os.path.exists(csv_path)
        csv = open(csv_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            csv.write(log_header(len(config.scales)) + "\n")
    try:
        while state.iteration < stop:
            idx = batch_indices(train_idx, config.batch_size, config.seed, state.iteration)
            row = train_step(state, config, images[idx], labels[idx])
            if csv:
                csv.write(_format_row(row) + "\n")
            if state.iteration % 100 == 0:
                log.info("iter %d lr %.5f loss %.4f", row[0], row[1], row[2])
            if out_dir and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                checkpoint.save(os.path.join(out_dir, f"ckpt_{state.iteration:06d}.msat"), state.to_tensors())
    finally:
        if csv:
            csv.close()
    if out_dir:
        checkpoint.save(os.path.join(out_dir, "model.msat"), state.to_tensors())
    return state


# -- inference ----------------------------------------------------------------

def model_params(tensors: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in tensors.items() if "/" not in k}


def check_params(params: dict[str, Tensor], config: RunConfig) -> None:
    expected = init_params(config.model_config(), config.ablation(), seed=0)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"checkpoint does not match config (missing {missing[:3]}, unexpected {extra[:3]})")
    for k, v in expected.items():
        if params[k].shape != v.shape:
            if k == "decoder.score.weight":
                raise ConfigError(f"checkpoint has {params[k].shape[0]} classes, config n_class={config.n_class}")
            raise ConfigError(f"{k}: checkpoint shape {params[k].shape} != config shape {v.shape}")


def predict_scores(params, config: RunConfig, images: np.ndarray, batch_size: int | None = None) -> np.ndarray:
    """Fused class scores at 1/4 input resolution for a stack of images."""
    outs = []
    step = batch_size or config.batch_size
    for i in range(0, len(images), step):
        out = model_forward(params, Tensor(images[i:i + step]), config.model_config(), config.ablation())
        outs.append(out.final.value.data)
    return np.concatenate(outs)


def evaluate_arrays(params, config: RunConfig, images: np.ndarray, labels: np.ndarray) -> dict:
    """Metrics at input resolution: fused scores are bilinearly upsampled, then argmaxed."""
    cm = None
    h, w = labels.shape[-2:]
    step = config.batch_size
    for i in range(0, len(images), step):
        scores = predict_scores(params, config, images[i:i + step])
        full = bilinear_resize(Tensor(scores), h, w).data
        cm = accumulate_confusion(predict_labels(full), labels[i:i + step], config.n_class, cm)
    return metrics_report(cm)


def evaluate(params, config: RunConfig, dataset=None, split: str = "val", out_dir: str | None = None) -> dict:
    images, labels, meta = dataset if dataset is not None else load_dataset(config.data)
    if meta.get("nClass", config.n_class) != config.n_class:
        raise ConfigError(f"dataset has {meta['nClass']} classes but config n_class={config.n_class}")
    check_params(params, config)
    train_idx, val_idx = split_indices(len(images))
    idx = {"train": train_idx, "val": val_idx, "all": list(range(len(images)))}[split]
    report = evaluate_arrays(params, config, images[idx], labels[idx])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as f:
            f.write(format_table(report))
        with open(os.path.join(out_dir, "metrics.kv"), "w", encoding="utf-8") as f:
            f.write(format_keyvalue(report))
    return report


ABLATION_ROWS = (
    ("attention-to-scale", dict(multi_stage=False, diverse_dilations=False, location_attention="attention", extra_branch=False)),
    ("+multi-stage", dict(multi_stage=True, diverse_dilations=False, location_attention="attention", extra_branch=False)),
    ("+diverse-dilations", dict(multi_stage=True, diverse_dilations=True, location_attention="attention", extra_branch=False)),
    ("full (+extra-branch)", dict(multi_stage=True, diverse_dilations=True, location_attention="attention", extra_branch=True)),
    ("merge-maxpool", dict(multi_stage=False, diverse_dilations=False, location_attention="maxpool", extra_branch=False)),
    ("merge-avgpool", dict(multi_stage=False, diverse_dilations=False, location_attention="avgpool", extra_branch=False)),
)


def ablate(config: RunConfig, seeds=(0,), dataset=None, rows=ABLATION_ROWS, out_dir: str | None = None) -> list[dict]:
    """Train and evaluate every ablation row with identical data and seeds."""
    dataset = dataset if dataset is not None else load_dataset(config.data)
    results = []
    for name, flags in rows:
        scores = []
        for seed in seeds:
            cfg = config.replace(seed=seed, **flags)
            state = train(cfg, dataset=dataset)
            scores.append(evaluate(state.params, cfg, dataset)["miou"])
            log.info("ablation %s seed %d miou %.4f", name, seed, scores[-1])
        results.append({"name": name, **flags, "miou": scores, "median_miou": float(np.median(scores))})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as f:
            f.write(format_ablation(results))
    return results


def format_ablation(results: list[dict]) -> str:
    lines = [f"{'method':<22}{'multi':>6}{'dil':>5}{'fusion':>11}{'extra':>7}{'mIoU':>9}", "-" * 60]
    for r in results:
        lines.append(
            f"{r['name']:<22}{'y' if r['multi_stage'] else '-':>6}{'y' if r['diverse_dilations'] else '-':>5}"
            f"{r['location_attention']:>11}{'y' if r['extra_branch'] else '-':>7}{r['median_miou']:>9.4f}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class Prediction:
    mask: np.ndarray            # uint8 [H, W]
    colorized: np.ndarray       # float [3, H, W]
    attention: list             # uint8 [h, w] per scale, softmax weights * 255
    recalibration: list         # uint8 [h, w] per class, sigmoid map * 255


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def predict(params, config: RunConfig, image: np.ndarray) -> Prediction:
    """Argmax mask (nearest-upsampled to the input size) plus attention maps."""
    if image.ndim != 3:
        raise ValueError(f"expected a [3, H, W] image, got {image.shape}")
    check_params(params, config)
    out = model_forward(params, Tensor(image[None]), config.model_config(), config.ablation())
    h, w = image.shape[1:]
    small = predict_labels(out.final.value.data)[0]
    mask = downsample_labels(small, h, w).astype(np.uint8)
    att = [] if out.location is None else [_to_u8(m) for m in out.location.value.data[0]]
    rec = [] if out.wr is None else [_to_u8(m) for m in out.wr.value.data[0]]
    return Prediction(mask, colorize_mask(mask, default_palette(config.n_class)), att, rec)


def gradcheck(config: RunConfig, sample_count: int = 50, epsilon: float = 1e-5, size: int = 32,
              batch: int = 2, seed: int = 0, dtype=np.float64, fd_dtype=None):
    """Finite-difference check of the full training loss on random data."""
    mcfg, abl = config.model_config(), config.ablation()
    params = init_params(mcfg, abl, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1)
    image = rng.uniform(0, 1, size=(batch, 3, size, size)).astype(dtype)
    labels = rng.integers(0, config.n_class, size=(batch, size, size))

    def forward(p):
        out = model_forward(p, Tensor(image, dtype=next(iter(p.values())).dtype), mcfg, abl)
        return out.tape, total_loss(out.tape, out.scores, out.final, labels)[0]

    return finite_diff_check(forward, params, epsilon=epsilon, sample_count=sample_count, seed=seed,
                             fd_dtype=fd_dtype)
