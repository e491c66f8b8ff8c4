"""Self-supervised training loop.

Each step draws a batch of brightness planes, synthesizes a disturbed
sibling per plane (fresh exponent every time a sample is drawn), runs
both through the shared network and minimizes the weighted loss total
with Adam. No reference images are ever required; when a directory of
paired references is configured, evaluation additionally reports PSNR
and model selection switches to it.

Dataset layout: either a flat directory of images, or one subdirectory
per multi-exposure sequence. Validation holds out one image per sequence
(drawn from the darker first third, sequences being ordered dark to
bright) or a seeded 10% of a flat directory.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .color import IMAGE_EXTENSIONS, HsvPlanes, from_bytes, regroup, rgb_to_hsv
from .disturbance import sample_gamma
from .losses import (
    LossBreakdown,
    PoolSpec,
    exposure_control,
    gradient_energy,
    reflectance_consistency,
    spatial_structure,
)
from .network import ArchSpec, ReflectanceNet, init_network, save_checkpoint

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}

# Deterministic exponents used when evaluating the loss on held-out
# images, so the selection criterion is comparable across epochs.
EVAL_GAMMA_DARK = 0.5
EVAL_GAMMA_BRIGHT = 3.0


class DatasetError(RuntimeError):
    """Raised when a data directory yields no usable images."""


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss."""


@dataclass
class TrainConfig:
    """Everything a training run needs; see the README for the file keys.

    Defaults follow the published protocol (batch 8, Adam at 1e-4, 500
    epochs, eval every 50, smoothness weight 10, one disturbance, pooling
    16/4 with exposure target 0.7) except image_size and base_channels,
    which default to desk scale (64 px, 16 channels) instead of 512 px.
    """

    data_dir: str
    out_dir: str = "train_out"
    image_size: int = 64
    batch_size: int = 8
    learning_rate: float = 1e-4
    epochs: int = 500
    eval_every: int = 50
    w_is: float = 10.0
    n_disturbances: int = 1
    seed: int = 0
    loss_rc: bool = True
    loss_ec: bool = True
    loss_ss: bool = True
    loss_is: bool = True
    base_channels: int = 16
    positivity: str = "softplus"
    n_exposure: int = 16
    m_structure: int = 4
    e_target: float = 0.7
    reference_dir: str | None = None

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.n_disturbances < 0:
            raise ValueError("n_disturbances must be >= 0")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.image_size < 16 or self.image_size % 16:
            raise ValueError("image_size must be a positive multiple of 16")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if self.n_exposure > self.image_size or self.m_structure > self.image_size:
            raise ValueError("pooling windows cannot exceed image_size")

    def pool_spec(self) -> PoolSpec:
        return PoolSpec(self.n_exposure, self.m_structure, self.e_target)

    def arch_spec(self) -> ArchSpec:
        return ArchSpec(base_channels=self.base_channels, positivity=self.positivity)


@dataclass(frozen=True)
class Sample:
    path: Path
    sequence: str | None
    hsv: HsvPlanes
    value: np.ndarray  # float32 (H, W)


@dataclass
class ImageDataset:
    samples: list[Sample]
    layout: str  # "flat" or "sequences"

    def __len__(self) -> int:
        return len(self.samples)


def _list_images(directory: Path) -> list[Path]:
    return sorted(
        (p for p in directory.iterdir()
         if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS),
        key=str,
    )


def _load_sample(path: Path, sequence: str | None, image_size: int) -> Sample | None:
    from PIL import Image

    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            img = from_bytes(np.asarray(rgb))
    except Exception as exc:  # undecodable file
        log.warning("skipping %s: %s", path, exc)
        return None
    hsv = rgb_to_hsv(img)
    hsv32 = HsvPlanes(*(p.astype(np.float32) for p in hsv))
    return Sample(path=path, sequence=sequence, hsv=hsv32, value=hsv32.value)


def load_dataset(data_dir: str | Path, image_size: int) -> ImageDataset:
    """Decode, resize and HSV-convert every image under `data_dir`.

    Subdirectories containing images are treated as sequences; otherwise
    the directory is read flat. Ordering is lexicographic by path.
    Undecodable files are skipped with a warning; an empty result is an
    error.
    """
    root = Path(data_dir)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")

    seq_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=str)
    sources: list[tuple[Path, str | None]] = []
    for d in seq_dirs:
        sources.extend((p, d.name) for p in _list_images(d))
    layout = "sequences" if sources else "flat"
    if not sources:
        sources = [(p, None) for p in _list_images(root)]
    if not sources:
        raise DatasetError(f"no images found under {root}")

    samples = []
    for path, seq in sources:
        sample = _load_sample(path, seq, image_size)
        if sample is not None:
            samples.append(sample)
    if not samples:
        raise DatasetError(f"no decodable images under {root}")
    return ImageDataset(samples=samples, layout=layout)


def split_dataset(
    dataset: ImageDataset, rng: np.random.Generator
) -> tuple[list[int], list[int]]:
    """Return (train_indices, val_indices).

    Sequence layout holds out one image per sequence, drawn from its
    first third; a flat layout holds out a seeded 10% (at least one image
    when there are two or more).
    """
    n = len(dataset)
    if dataset.layout == "sequences":
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(dataset.samples):
            groups.setdefault(s.sequence or "", []).append(i)
        val = []
        for name in sorted(groups):
            idxs = groups[name]
            first_third = idxs[: max(1, math.ceil(len(idxs) / 3))]
            val.append(first_third[int(rng.integers(len(first_third)))])
    else:
        n_val = int(round(0.1 * n))
        if n >= 2:
            n_val = max(1, n_val)
        n_val = min(n_val, n - 1) if n > 1 else 0
        val = sorted(int(i) for i in rng.choice(n, size=n_val, replace=False))
    val_set = set(val)
    train = [i for i in range(n) if i not in val_set]
    return train, sorted(val_set)


@dataclass
class StepRecord:
    step: int
    epoch: int
    l_rc: float
    l_ec: float
    l_ss: float
    l_is: float
    total: float
    # Monitoring values: computed for every component even when its
    # toggle removes it from the optimized total.
    raw_l_rc: float = 0.0
    raw_l_ec: float = 0.0
    raw_l_ss: float = 0.0
    raw_l_is: float = 0.0


@dataclass
class EvalRecord:
    epoch: int
    step: int
    mean_total: float
    mean_psnr: float | None
    criterion: float
    n_images: int
    on_train_set: bool


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    wall_seconds: float = 0.0

    def write_jsonl(self, path: str | Path) -> None:
        """Line-delimited records for plotting; wall clock intentionally
        excluded so identical runs produce identical files."""
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **asdict(rec)}) + "\n")
            for rec in self.evals:
                fh.write(json.dumps({"kind": "eval", **asdict(rec)}) + "\n")

    @staticmethod
    def read_jsonl(path: str | Path) -> "TrainLog":
        out = TrainLog()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("kind")
                if kind == "step":
                    out.steps.append(StepRecord(**rec))
                elif kind == "eval":
                    out.evals.append(EvalRecord(**rec))
        return out


def _disturbed_batch(
    batch: torch.Tensor, rng: np.random.Generator
) -> tuple[torch.Tensor, list[float]]:
    """Per-sample exponent draw and elementwise power; no gradient flows
    through the disturbance (it generates data, it is not learned)."""
    gammas = [
        sample_gamma(float(batch[i].mean()), rng).gamma for i in range(batch.shape[0])
    ]
    g = torch.tensor(gammas, dtype=batch.dtype).view(-1, 1, 1, 1)
    return batch**g, gammas


def _zero_like(t: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=t.dtype)


def train_step(
    net: ReflectanceNet,
    optimizer: torch.optim.Optimizer,
    batch: torch.Tensor,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[LossBreakdown, dict[str, float]]:
    """One optimizer update on a (B, 1, H, W) batch of V planes.

    Returns the LossBreakdown that was optimized plus a dict of raw
    monitoring values. Breakdown components whose toggle is off (or whose
    inputs do not exist, like consistency with zero disturbances) are
    exactly zero; the raw dict always carries the measured values.
    """
    if batch.ndim != 4 or batch.shape[0] < 1:
        raise ValueError("batch must be a non-empty (B, 1, H, W) tensor")
    pool = config.pool_spec()

    variants = []
    for _ in range(config.n_disturbances):
        v_prime, _gammas = _disturbed_batch(batch, rng)
        variants.append(v_prime)

    out = net(batch)
    outs_prime = [net(v) for v in variants]

    r = out.reflectance
    raw_rc = (
        torch.stack(
            [reflectance_consistency(r, o.reflectance) for o in outs_prime]
        ).mean()
        if outs_prime
        else _zero_like(r)
    )
    raw_ec = exposure_control(r, pool)
    raw_ss = spatial_structure(r, batch, pool)
    raw_is = gradient_energy(out.inverse_illumination)
    for o in outs_prime:
        raw_is = raw_is + gradient_energy(o.inverse_illumination)

    zero = _zero_like(r)
    l_rc = raw_rc if (config.loss_rc and outs_prime) else zero
    l_ec = raw_ec if config.loss_ec else zero
    l_ss = raw_ss if config.loss_ss else zero
    l_is = raw_is if config.loss_is else zero
    total = l_rc + l_ec + l_ss + config.w_is * l_is

    if not torch.isfinite(total):
        per_sample = _per_sample_totals(net, batch, variants, config)
        bad = [i for i, t in enumerate(per_sample) if not math.isfinite(t)]
        raise TrainingDiverged(
            f"non-finite loss; offending batch indices {bad}; "
            f"per-sample totals {per_sample}"
        )

    optimizer.zero_grad()
    total.backward()
    optimizer.step()

    breakdown = LossBreakdown(
        l_rc=l_rc.detach(),
        l_ec=l_ec.detach(),
        l_ss=l_ss.detach(),
        l_is=l_is.detach(),
        total=total.detach(),
        w_is=config.w_is,
    )
    raw = {
        "raw_l_rc": float(raw_rc),
        "raw_l_ec": float(raw_ec),
        "raw_l_ss": float(raw_ss),
        "raw_l_is": float(raw_is),
    }
    return breakdown, raw


def _per_sample_totals(net, batch, variants, config) -> list[float]:
    pool = config.pool_spec()
    totals = []
    with torch.no_grad():
        for i in range(batch.shape[0]):
            v = batch[i : i + 1]
            out = net(v)
            t = exposure_control(out.reflectance, pool) + spatial_structure(
                out.reflectance, v, pool
            )
            t = t + config.w_is * gradient_energy(out.inverse_illumination)
            for var in variants:
                op = net(var[i : i + 1])
                t = t + reflectance_consistency(out.reflectance, op.reflectance)
                t = t + config.w_is * gradient_energy(op.inverse_illumination)
            totals.append(float(t))
    return totals


def _eval_gamma(mean_v: float) -> float:
    return EVAL_GAMMA_DARK if mean_v < 0.5 else EVAL_GAMMA_BRIGHT


def _eval_loss(net, values: torch.Tensor, config: TrainConfig) -> float:
    """Mean total loss over a stack of V planes with deterministic
    disturbance exponents."""
    pool = config.pool_spec()
    totals = []
    with torch.no_grad():
        for i in range(values.shape[0]):
            v = values[i : i + 1]
            gamma = _eval_gamma(float(v.mean()))
            out = net(v)
            out_p = net(v**gamma)
            l_rc = reflectance_consistency(out.reflectance, out_p.reflectance)
            l_ec = exposure_control(out.reflectance, pool)
            l_ss = spatial_structure(out.reflectance, v, pool)
            l_is = gradient_energy(out.inverse_illumination) + gradient_energy(
                out_p.inverse_illumination
            )
            totals.append(float(l_rc + l_ec + l_ss + config.w_is * l_is))
    return float(np.mean(totals))


def _enhanced_image(net: ReflectanceNet, sample: Sample) -> np.ndarray:
    from .network import forward

    out = forward(net, sample.value)
    enhanced_v = np.clip(out.reflectance, 0.0, 1.0)
    return regroup(sample.hsv, enhanced_v.astype(np.float64))


def _eval_psnr(
    net: ReflectanceNet,
    dataset: ImageDataset,
    indices: list[int],
    reference_dir: Path,
    image_size: int,
) -> float | None:
    from PIL import Image

    scores = []
    for i in indices:
        sample = dataset.samples[i]
        ref_path = reference_dir / sample.path.name
        if not ref_path.exists():
            log.warning("no reference for %s; skipped in PSNR eval", sample.path.name)
            continue
        with Image.open(ref_path) as im:
            ref = from_bytes(
                np.asarray(im.convert("RGB").resize((image_size, image_size), Image.BILINEAR))
            )
        score = metrics.psnr(_enhanced_image(net, sample), ref)
        if math.isfinite(score):
            scores.append(score)
    return float(np.mean(scores)) if scores else None


@dataclass
class TrainResult:
    final: ReflectanceNet
    best: ReflectanceNet
    log: TrainLog
    out_dir: Path
    final_path: Path
    best_path: Path
    log_path: Path


def train(config: TrainConfig) -> TrainResult:
    """Run the full loop and write final/best checkpoints plus the log.

    The best model is the one minimizing the evaluation criterion (mean
    held-out loss, or negated mean PSNR when references are configured),
    measured every `eval_every` epochs and at the final epoch. All
    randomness derives from `config.seed`, so identical configurations
    reproduce identical logs and checkpoints.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    t_start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    dataset = load_dataset(config.data_dir, config.image_size)
    train_idx, val_idx = split_dataset(dataset, rng)
    eval_idx, eval_on_train = (val_idx, False) if val_idx else (train_idx, True)

    net = init_network(config.arch_spec(), seed=config.seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)

    all_values = torch.from_numpy(
        np.stack([s.value for s in dataset.samples])
    ).unsqueeze(1)
    eval_values = all_values[eval_idx]
    reference_dir = Path(config.reference_dir) if config.reference_dir else None

    train_log = TrainLog()
    best_state = copy.deepcopy(net.state_dict())
    best_criterion = math.inf
    step = 0

    def run_eval(epoch: int) -> None:
        nonlocal best_state, best_criterion
        mean_total = _eval_loss(net, eval_values, config)
        mean_psnr = None
        if reference_dir is not None:
            mean_psnr = _eval_psnr(
                net, dataset, eval_idx, reference_dir, config.image_size
            )
        criterion = -mean_psnr if mean_psnr is not None else mean_total
        train_log.evals.append(
            EvalRecord(
                epoch=epoch,
                step=step,
                mean_total=mean_total,
                mean_psnr=mean_psnr,
                criterion=criterion,
                n_images=len(eval_idx),
                on_train_set=eval_on_train,
            )
        )
        if criterion < best_criterion:
            best_criterion = criterion
            best_state = copy.deepcopy(net.state_dict())
        log.info(
            "epoch %d eval: mean_total=%.6f mean_psnr=%s",
            epoch,
            mean_total,
            f"{mean_psnr:.3f}" if mean_psnr is not None else "n/a",
        )

    if config.epochs > 0 and not train_idx:
        raise DatasetError("the validation split left no training images")

    for epoch in range(1, config.epochs + 1):
        order = [train_idx[int(i)] for i in rng.permutation(len(train_idx))]
        for lo in range(0, len(order), config.batch_size):
            batch = all_values[order[lo : lo + config.batch_size]]
            breakdown, raw = train_step(net, optimizer, batch, config, rng)
            step += 1
            train_log.steps.append(
                StepRecord(step=step, epoch=epoch, **breakdown.floats(), **raw)
            )
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            run_eval(epoch)

    best_net = ReflectanceNet(config.arch_spec())
    best_net.load_state_dict(best_state)
    best_net.eval()
    net.eval()

    final_path = out_dir / "final.ckpt"
    best_path = out_dir / "best.ckpt"
    log_path = out_dir / "train_log.jsonl"
    save_checkpoint(final_path, net)
    save_checkpoint(best_path, best_net)
    train_log.wall_seconds = time.perf_counter() - t_start
    train_log.write_jsonl(log_path)

    return TrainResult(
        final=net,
        best=best_net,
        log=train_log,
        out_dir=out_dir,
        final_path=final_path,
        best_path=best_path,
        log_path=log_path,
    )
