"""Training loop, configuration, evaluation, and inference.

The trainer never reads ground truth from the training split: samples are
preloaded through the counting accessor methods that leave ``gt_reads`` at
zero, and the counter is asserted after every run. Validation and testing use
their own splits, where ground truth is an evaluation-only input.

Configs are line-oriented ``key = value`` text; every key matches a
TrainConfig field.
"""

import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attention_net import ApbConfig, ApbModel, FeaturePyramid
from .autodiff import Tape, Tensor, backward
from .checkpoint import Checkpoint
from .errors import ConfigError, DataError, NumericError
from .knowledge import KebConfig, embed_set
from .maps import AttentionMap, Manifest, SampleSet, normalize_spatial, read_frame
from .errors import UndefinedCorrelationError
from .objective import cc, format_report, kld, training_loss
from .optim import AdamW, lr_schedule
from .uncertainty_net import UmbConfig, UmbModel

KEB_STRATEGIES = ("single", "concat", "off")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    warmup_steps: int = -1        # -1: 5% of total steps
    seed: int = 0
    keb_strategy: str = "single"
    keb_alpha: float = 0.3
    keb_renormalize: bool = True
    sources: tuple = ()           # () selects every manifest source
    resolution: str = ""          # "HxW"; "" adopts the dataset's size
    base_channels: int = 8
    umb_width: int = 8
    stride: int = 1               # train-split subsampling

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {b}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        for name in ("epochs", "batch_size", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.warmup_steps < -1:
            raise ConfigError("warmup_steps must be -1 (auto) or >= 0")
        if self.keb_strategy not in KEB_STRATEGIES:
            raise ConfigError(
                f"keb_strategy must be one of {KEB_STRATEGIES}, got {self.keb_strategy!r}"
            )
        if self.keb_alpha <= 0 or not math.isfinite(self.keb_alpha):
            raise ConfigError("keb_alpha must be finite and positive")
        if self.resolution:
            parse_resolution(self.resolution)
        return self

    def keb_config(self) -> Optional[KebConfig]:
        if self.keb_strategy == "off":
            return None
        return KebConfig(strategy=self.keb_strategy, alpha=self.keb_alpha,
                         renormalize=self.keb_renormalize)


def parse_resolution(text: str) -> tuple:
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip())
    if not m:
        raise ConfigError(f"resolution must look like 64x64, got {text!r}")
    return int(m.group(1)), int(m.group(2))


_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def parse_config_text(text: str) -> TrainConfig:
    defaults = TrainConfig()
    fields = {f: type(getattr(defaults, f)) for f in vars(defaults)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kind = fields[key]
        try:
            if kind is bool:
                if val.lower() not in _BOOL_WORDS:
                    raise ValueError(val)
                values[key] = _BOOL_WORDS[val.lower()]
            elif kind is int:
                values[key] = int(val)
            elif kind is float:
                values[key] = float(val)
            elif kind is tuple:
                values[key] = tuple(s.strip() for s in val.split(",") if s.strip())
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return TrainConfig(**values).validate()


def parse_config_file(path) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class _TrainData:
    """Preloaded training tensors; built without touching ground truth."""

    frames: np.ndarray            # [M, 3, H, W]
    targets: List[np.ndarray]     # per source [M, 1, H, W], loss targets
    net_inputs: List[np.ndarray]  # per source [M, C, H, W], UMB inputs
    source_names: tuple
    sample_ids: List[str]


def _select_sources(available: int, wanted: Sequence[str]) -> List[int]:
    names = [f"s{i + 1}" for i in range(available)]
    if not wanted:
        return list(range(available))
    indices = []
    for w in wanted:
        if w not in names:
            raise ConfigError(f"source {w!r} not in manifest (has {names})")
        indices.append(names.index(w))
    return indices


def _prepare_training_data(ds: SampleSet, cfg: TrainConfig) -> _TrainData:
    if len(ds) == 0:
        raise DataError("training split is empty")
    keb = cfg.keb_config()
    first_labels = ds.labels(0)
    picks = _select_sources(len(first_labels), cfg.sources)
    names = tuple(first_labels.source_names[i] for i in picks)

    frames, ids = [], []
    targets = [[] for _ in picks]
    net_inputs = [[] for _ in picks]
    for i in range(len(ds)):
        frames.append(ds.frame(i))
        ids.append(ds.sample_id(i))
        label_set = ds.labels(i)
        if len(label_set) <= max(picks):
            raise DataError(f"sample {ds.sample_id(i)} has too few pseudo-labels")
        mask = ds.mask(i)
        if cfg.keb_strategy == "single":
            embedded = embed_set(label_set, mask, keb)
            chosen = [embedded.maps[p] for p in picks]
            for slot, amap in zip(targets, chosen):
                slot.append(amap.values[None])
            for slot, amap in zip(net_inputs, chosen):
                slot.append(amap.values[None])
        else:
            normed = [normalize_spatial(label_set.maps[p]) for p in picks]
            for slot, amap in zip(targets, normed):
                slot.append(amap.values[None])
            if cfg.keb_strategy == "concat":
                mask_plane = (mask.values if mask is not None
                              else np.zeros_like(normed[0].values))
                for slot, amap in zip(net_inputs, normed):
                    slot.append(np.stack([amap.values, mask_plane]))
            else:
                for slot, amap in zip(net_inputs, normed):
                    slot.append(amap.values[None])
    return _TrainData(
        frames=np.stack(frames),
        targets=[np.stack(t) for t in targets],
        net_inputs=[np.stack(t) for t in net_inputs],
        source_names=names,
        sample_ids=ids,
    )


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

class Pipeline:
    """APB + UMB pair with joint parameter and checkpoint handling."""

    def __init__(self, cfg: TrainConfig, height: int, width: int, n_sources: int):
        seed_rng = np.random.default_rng([cfg.seed, 0])
        apb_cfg = ApbConfig(height=height, width=width,
                            base_channels=cfg.base_channels)
        self.apb = ApbModel(apb_cfg, seed_rng)
        label_channels = 2 if cfg.keb_strategy == "concat" else 1
        umb_cfg = UmbConfig(sources=n_sources, width=cfg.umb_width,
                            label_channels=label_channels,
                            pyramid_channels=apb_cfg.pyramid_channels)
        self.umb = UmbModel(umb_cfg, seed_rng)
        self.height, self.width = height, width
        self.n_sources = n_sources

    def named_parameters(self):
        yield from self.apb.named_parameters("apb")
        yield from self.umb.named_parameters("umb")

    def forward(self, frames: Tensor, label_inputs: List[Tensor]):
        pyramid, logits = self.apb.forward(frames)
        s = ad.spatial_softmax(logits)
        e_maps = self.umb.forward(label_inputs, pyramid)
        return s, e_maps

    def load_arrays(self, arrays) -> None:
        for name, p in self.named_parameters():
            key = f"param/{name}"
            if key not in arrays:
                raise DataError(f"checkpoint missing parameter {name}")
            if arrays[key].shape != p.data.shape:
                raise DataError(f"checkpoint shape mismatch for {name}")
            p.data[...] = arrays[key]


def build_pipeline_from_checkpoint(ck: Checkpoint) -> tuple:
    cfg = TrainConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                         for k, v in ck.config["train"].items()}).validate()
    h, w = ck.config["height"], ck.config["width"]
    pipe = Pipeline(cfg, h, w, ck.config["n_sources"])
    pipe.load_arrays(ck.arrays)
    return pipe, cfg


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_kld: float
    val_cc: float
    mean_e: tuple


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    best_epoch: int
    history: List[EpochStats] = field(default_factory=list)
    gt_reads_during_training: int = 0
    source_names: tuple = ()


def _checkpoint_of(pipe: Pipeline, opt: AdamW, cfg: TrainConfig,
                   step: int) -> Checkpoint:
    ck = Checkpoint(config={
        "train": asdict(cfg) | {"sources": list(cfg.sources)},
        "height": pipe.height,
        "width": pipe.width,
        "n_sources": pipe.n_sources,
    }, step=step)
    for name, p in pipe.named_parameters():
        ck.put(f"param/{name}", p.data)
    for name, arr in opt.state_arrays():
        ck.put(name, arr)
    return ck


def _cc_or_zero(pred: np.ndarray, g: np.ndarray) -> float:
    """Correlation, with degenerate (constant) inputs scored as 0.

    An untrained model predicts a uniform map whose variance is zero;
    treating that as "no correlation" keeps reports well-defined.
    """
    try:
        return cc(pred, g)
    except UndefinedCorrelationError:
        return 0.0


def _validate(pipe: Pipeline, val_ds: SampleSet) -> tuple:
    """Mean KLD / CC of the attention head over a ground-truthed split."""
    klds, ccs = [], []
    for i in range(len(val_ds)):
        if not val_ds.has_ground_truth(i):
            continue
        pred = pipe.apb.predict(Tensor(val_ds.frame(i)[None]))
        g = normalize_spatial(val_ds.ground_truth(i))
        klds.append(kld(g, pred))
        ccs.append(_cc_or_zero(pred.values, g.values))
    if not klds:
        raise DataError("validation split has no ground truth")
    return float(np.mean(klds)), float(np.mean(ccs))


def train(cfg: TrainConfig, data_dir, out_dir,
          log=lambda msg: None) -> TrainResult:
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest.load(Path(data_dir) / "manifest.tsv")
    train_ds = SampleSet(man.base_dir, man.split("train", stride=cfg.stride))
    val_ds = SampleSet(man.base_dir, man.split("val"))
    data = _prepare_training_data(train_ds, cfg)

    h, w = data.frames.shape[2:]
    if cfg.resolution:
        want = parse_resolution(cfg.resolution)
        if want != (h, w):
            raise ConfigError(f"config resolution {want} != dataset {h}x{w}")
    n = len(data.source_names)
    pipe = Pipeline(cfg, h, w, n)
    opt = AdamW(list(pipe.named_parameters()), betas=(cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay)

    m = data.frames.shape[0]
    steps_per_epoch = math.ceil(m / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = (max(1, round(0.05 * total_steps)) if cfg.warmup_steps == -1
              else min(cfg.warmup_steps, total_steps))

    order_rng = np.random.default_rng([cfg.seed, 1])
    step = 0
    best = (math.inf, -1)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(m)
        losses = []
        e_accum = np.zeros(n)
        for lo in range(0, m, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            lr_t = lr_schedule(step, total_steps, warmup, cfg.lr)
            with Tape() as tape:
                s, e_maps = pipe.forward(
                    Tensor(data.frames[batch]),
                    [Tensor(x[batch]) for x in data.net_inputs],
                )
                loss, breakdown = training_loss(
                    s, [t[batch] for t in data.targets], e_maps)
            if not math.isfinite(loss.item()):
                first = data.sample_ids[batch[0]]
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(batch starting at sample {first})"
                )
            grads = backward(loss, tape)
            opt.step(grads, lr_t)
            step += 1
            losses.append(loss.item())
            e_accum += np.array(breakdown.e)

        val_kld, val_cc = _validate(pipe, val_ds)
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_kld=val_kld,
            val_cc=val_cc,
            mean_e=tuple(e_accum / steps_per_epoch),
        )
        history.append(stats)
        log(f"epoch {epoch}/{cfg.epochs} loss {stats.train_loss:.5f} "
            f"val_kld {val_kld:.5f} val_cc {val_cc:.4f}")
        ck = _checkpoint_of(pipe, opt, cfg, step)
        ck.save(out / f"epoch_{epoch:03d}.atck")
        if val_kld < best[0]:
            best = (val_kld, epoch)
            ck.save(out / "best.atck")

    if train_ds.gt_reads != 0:
        raise RuntimeError(
            f"training read ground truth {train_ds.gt_reads} times"
        )
    last = out / f"epoch_{cfg.epochs:03d}.atck"
    return TrainResult(
        best_checkpoint=out / "best.atck",
        last_checkpoint=last,
        best_epoch=best[1],
        history=history,
        gt_reads_during_training=train_ds.gt_reads,
        source_names=data.source_names,
    )


# ---------------------------------------------------------------------------
# evaluation and inference
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    rows: list                    # (sample_id, kld, cc)
    mean_kld: float
    std_kld: float
    mean_cc: float
    std_cc: float
    baselines: dict               # source name -> mean KLD(G, raw label)

    def report_text(self) -> str:
        return format_report(self.rows)

    def summary_text(self) -> str:
        lines = [
            f"# samples\t{len(self.rows)}",
            f"# kld_mean\t{self.mean_kld!r}\tkld_std\t{self.std_kld!r}",
            f"# cc_mean\t{self.mean_cc!r}\tcc_std\t{self.std_cc!r}",
        ]
        for name, value in self.baselines.items():
            lines.append(f"# baseline_kld\t{name}\t{value!r}")
        return "\n".join(lines) + "\n"


def evaluate(ckpt_path, data_dir, split: str = "test") -> EvalResult:
    ck = Checkpoint.load(ckpt_path)
    pipe, _ = build_pipeline_from_checkpoint(ck)
    man = Manifest.load(Path(data_dir) / "manifest.tsv")
    ds = SampleSet(man.base_dir, man.split(split))
    if len(ds) == 0:
        raise DataError(f"split {split!r} is empty")
    rows = []
    base_sums = {}
    for i in range(len(ds)):
        if not ds.has_ground_truth(i):
            raise DataError(f"sample {ds.sample_id(i)} lacks ground truth")
        g = normalize_spatial(ds.ground_truth(i))
        pred = pipe.apb.predict(Tensor(ds.frame(i)[None]))
        rows.append((ds.sample_id(i), kld(g, pred),
                     _cc_or_zero(pred.values, g.values)))
        labels = ds.labels(i)
        for name, amap in zip(labels.source_names, labels.maps):
            base_sums.setdefault(name, []).append(kld(g, normalize_spatial(amap)))
    klds = np.array([r[1] for r in rows])
    ccs = np.array([r[2] for r in rows])
    return EvalResult(
        rows=rows,
        mean_kld=float(klds.mean()),
        std_kld=float(klds.std()),
        mean_cc=float(ccs.mean()),
        std_cc=float(ccs.std()),
        baselines={k: float(np.mean(v)) for k, v in base_sums.items()},
    )


def infer(ckpt_path, frame_path, out_path) -> AttentionMap:
    """Run the attention head on one frame; writes ATNM plus a PGM preview."""
    from .maps import export_pgm, save_map

    ck = Checkpoint.load(ckpt_path)
    pipe, _ = build_pipeline_from_checkpoint(ck)
    frame = read_frame(frame_path)
    if frame.shape[1:] != (pipe.height, pipe.width):
        raise DataError(
            f"frame is {frame.shape[1:]}, checkpoint expects "
            f"{(pipe.height, pipe.width)}"
        )
    pred = pipe.apb.predict(Tensor(frame[None]))
    out = Path(out_path)
    save_map(pred, out)
    export_pgm(pred, out.with_suffix(".pgm"))
    return pred
