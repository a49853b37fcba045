"""Training loop, checkpointing, sliding-window evaluation, and sweeps.

One iteration samples a rotated patch, runs the forward pass with the
configured module switches, composes the supervised, divergence, and edge
losses under the warm-up weight, and takes one SGD step.  Three independent
RNG streams (weight init, patch schedule, background sampling) keep the
patch schedule identical across module-switch variants of the same seed and
make checkpoint resume bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import engine as E
from .edges import ECConfig, build_truth_map, continuity_loss, ec_loss, extract_boundary, match_loss, predicted_keypoints, truth_keypoints
from .engine import Tape, Tensor
from .errors import ConfigError, FormatError, SamplingExhaustedError, TrainingAborted
from .foreground import FAConfig, PatchSample, adaptive_weight, fa_loss, sample_background
from .losses import ce_loss, dice_loss, ramp_lambda, sup_loss, total_loss
from .metrics import MetricsReport, aggregate_reports, evaluate_metrics
from .network import UNet
from .phantom import Volume, list_volumes, read_volume, rotate_augment
from .wavelets import get_basis

_f32 = np.float32

FA_STATS_EVERY = 200


@dataclass
class RunConfig:
    data_dir: str = ""
    out_dir: str = "runs/default"
    iterations: int = 2000
    patch_size: int = 64
    num_classes: int = 3
    base_channels: int = 8
    lr: float = 0.01
    lr_schedule: str = "poly"    # "poly": lr * (1 - t/t_max)^lr_power, or "constant"
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0001
    grad_clip: float = 1.0       # global gradient-norm ceiling; 0 disables
    fa: bool = True
    flfe: bool = True
    ec: bool = True
    alpha: float = 0.1
    bg_size: int = 32
    fa_detach_bg: bool = False
    wavelet: str = "db2"
    ec_radius: int = 5
    ec_k: int = 10
    ec_dilation: int = 2
    ec_edges: str = "mask"
    ec_ce_band: bool = False
    seed: int = 0
    checkpoint_every: int = 500
    eval_window: int = 64
    eval_stride: int = 32

    def validate(self) -> None:
        for name in ("iterations", "patch_size", "num_classes", "base_channels",
                     "checkpoint_every", "eval_window", "eval_stride"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "momentum", "weight_decay", "alpha", "bg_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.patch_size % 8:
            raise ConfigError(f"patch_size {self.patch_size} must be divisible by 8")
        if self.bg_size > self.patch_size:
            raise ConfigError("bg_size cannot exceed patch_size")
        if self.lr_schedule not in ("poly", "constant"):
            raise ConfigError(f"lr_schedule must be 'poly' or 'constant', got {self.lr_schedule!r}")
        get_basis(self.wavelet)

    def lr_at(self, t: int) -> float:
        """Learning rate for iteration t (1-based); poly decays the initial lr."""
        if self.lr_schedule == "constant":
            return self.lr
        frac = (t - 1) / self.iterations
        return self.lr * (1.0 - frac) ** self.lr_power

    def config_hash(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if k not in ("data_dir", "out_dir")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def fa_config(self) -> FAConfig:
        return FAConfig(self.alpha, (self.bg_size,) * 3, detach_background=self.fa_detach_bg)

    def ec_config(self) -> ECConfig:
        return ECConfig(
            radius=self.ec_radius, nms_k=self.ec_k, truth_dilation=self.ec_dilation,
            edges=self.ec_edges, ce_band=self.ec_ce_band,
        )


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams: 'init' (weights), 'data' (patch schedule), 'fa'."""
    init_ss, data_ss, fa_ss = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": np.random.default_rng(init_ss),
        "data": np.random.default_rng(data_ss),
        "fa": np.random.default_rng(fa_ss),
    }


def build_network(cfg: RunConfig, rng: np.random.Generator) -> UNet:
    basis = get_basis(cfg.wavelet) if cfg.flfe else None
    return UNet(rng, cfg.num_classes, cfg.base_channels, flfe_basis=basis)


class SGD:
    """Classic momentum SGD: v = mu*v + (g + wd*w); w -= lr*v."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float,
                 momentum: float, weight_decay: float):
        self.named_params = named_params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in named_params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + _f32(self.weight_decay) * p.data
            v = self.velocity[name]
            v *= _f32(self.momentum)
            v += g
            p.data -= _f32(lr) * v

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale all gradients so their global L2 norm stays below max_norm.

        Single-patch soft-Dice terms on nearly empty classes spike the
        gradient by orders of magnitude; clipping keeps momentum from
        turning those spikes into training collapses.
        """
        total = 0.0
        for _, p in self.named_params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = total ** 0.5
        if max_norm > 0 and norm > max_norm:
            scale = _f32(max_norm / norm)
            for _, p in self.named_params:
                if p.grad is not None:
                    p.grad *= scale
        return norm


def sample_patch(vol: Volume, patch_size: int, rng: np.random.Generator) -> Volume:
    """Uniform patch origin plus the 90-degree rotation augmentation."""
    dims = vol.intensities.shape
    origin = tuple(int(rng.integers(0, d - patch_size + 1)) for d in dims)
    sl = tuple(slice(o, o + patch_size) for o in origin)
    patch = Volume(
        np.ascontiguousarray(vol.intensities[sl]),
        np.ascontiguousarray(vol.labels[sl]),
        vol.spacing_mm,
    )
    return rotate_augment(patch, rng)


def _pad_to_multiple8(arr: np.ndarray) -> np.ndarray:
    dims = arr.shape
    target = tuple(((d + 7) // 8) * 8 for d in dims)
    if target == dims:
        return arr
    out = np.zeros(target, dtype=arr.dtype)
    out[tuple(slice(0, d) for d in dims)] = arr
    return out


@dataclass
class TrainResult:
    records: list[dict]
    checkpoint_path: Path | None
    net: UNet
    aborted: bool = False


def save_checkpoint(path, net: UNet, opt: SGD, iteration: int, cfg: RunConfig,
                    rngs: dict[str, np.random.Generator]) -> None:
    header = {
        "iteration": iteration,
        "rng_state": {k: rngs[k].bit_generator.state for k in ("data", "fa")},
        "config_hash": cfg.config_hash(),
    }
    arrays = net.state_arrays()
    arrays += [("velocity:" + n, v) for n, v in opt.velocity.items()]
    E.save_tensors(path, arrays, header=header)


def load_checkpoint(path, net: UNet, opt: SGD, cfg: RunConfig,
                    rngs: dict[str, np.random.Generator]) -> int:
    header, arrays = E.load_tensors(path, with_header=True)
    if header.get("config_hash") != cfg.config_hash():
        raise ConfigError("checkpoint config hash does not match the current config")
    net.load_state_arrays(arrays)
    for name in opt.velocity:
        key = "velocity:" + name
        if key not in arrays:
            raise FormatError(f"checkpoint is missing optimizer state for {name!r}")
        opt.velocity[name] = arrays[key].astype(_f32).reshape(opt.velocity[name].shape)
    for k in ("data", "fa"):
        state = header["rng_state"][k]
        rngs[k].bit_generator.state = state
    return int(header["iteration"])


def train(
    cfg: RunConfig,
    volumes: list[Volume] | None = None,
    resume: str | Path | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    cfg.validate()
    if volumes is None:
        stems = list_volumes(cfg.data_dir)
        if not stems:
            raise ConfigError(f"no training volumes found in {cfg.data_dir!r}")
        volumes = [read_volume(s) for s in stems]
    for v in volumes:
        if any(d < cfg.patch_size for d in v.intensities.shape):
            raise ConfigError(
                f"volume dims {v.intensities.shape} smaller than patch {cfg.patch_size}"
            )
    fg_counts = [int(np.count_nonzero(v.labels > 0)) for v in volumes]

    rngs = make_rngs(cfg.seed)
    net = build_network(cfg, rngs["init"])
    opt = SGD(net.named_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    fa_cfg = cfg.fa_config()
    ec_cfg = cfg.ec_config()

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.fck"
    start = 0
    if resume is not None:
        start = load_checkpoint(resume, net, opt, cfg, rngs)

    log_fh = open(log_path, "a") if log_path is not None else None
    records: list[dict] = []
    fa_attempts = fa_accepts = 0
    fa_overlap_sum = 0.0
    last_good: Path | None = ckpt_path if resume is not None else None

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")

    net.set_training(True)
    try:
        for t in range(start + 1, cfg.iterations + 1):
            vi = int(rngs["data"].integers(0, len(volumes)))
            patch = sample_patch(volumes[vi], cfg.patch_size, rngs["data"])
            label = patch.labels
            x = Tensor(patch.intensities[None])

            with Tape() as tape:
                feats = net.encode(x, flfe_enabled=cfg.flfe)
                seg = net.decode(feats)
                probs = E.softmax(seg.seg_logits, axis=0)
                l_sup = sup_loss(dice_loss(probs, label), ce_loss(seg.seg_logits, label))

                l_d = None
                fa_skipped = False
                if cfg.fa:
                    omega = adaptive_weight(PatchSample(x, label), fg_counts[vi])
                    if omega <= 0.0:
                        fa_skipped = True
                    else:
                        try:
                            bg = sample_background(PatchSample(x, label), fa_cfg, rngs["fa"])
                            fa_attempts += bg.attempts
                            fa_accepts += 1
                            fa_overlap_sum += bg.overlap_fraction
                            bg_data = _pad_to_multiple8(bg.region.data[0])
                            feats_bg = net.encode(Tensor(bg_data[None]), flfe_enabled=False)
                            l_d = fa_loss(feats[-1], feats_bg[-1], omega, cfg.fa_detach_bg)
                        except SamplingExhaustedError:
                            fa_attempts += fa_cfg.max_attempts
                            fa_skipped = True

                l_ec_t = None
                ec_skipped = False
                if cfg.ec:
                    tk = truth_keypoints(label, ec_cfg,
                                         intensities=patch.intensities if cfg.ec_edges == "image" else None)
                    if tk.empty or tk.truth_map.sum() == 0:
                        ec_skipped = True
                    else:
                        m_pred = E.sigmoid(seg.boundary_logits)
                        band = None
                        if ec_cfg.ce_band:
                            band = build_truth_map(
                                extract_boundary(label > 0), label.shape, ec_cfg.ce_band_radius
                            )
                        l_match, _ = match_loss(m_pred, tk.truth_map, band=band)
                        pred_pts = predicted_keypoints(m_pred.data, ec_cfg)
                        l_cont, _ = continuity_loss(m_pred, pred_pts, tk.points, ec_cfg.epsilon)
                        l_ec_t = ec_loss(l_match, l_cont)

                lam = ramp_lambda(t, cfg.iterations)
                total, breakdown = total_loss(l_sup, l_d, l_ec_t, lam,
                                              fa_skipped=fa_skipped, ec_skipped=ec_skipped)
                tape.backward(total)

            if cfg.grad_clip > 0:
                opt.clip_grad_norm(cfg.grad_clip)
            opt.step(cfg.lr_at(t))
            opt.zero_grad()
            emit(breakdown.log_record(t))

            if cfg.fa and t % FA_STATS_EVERY == 0:
                emit({
                    "type": "fa_sampler", "t": t,
                    "accept_rate": fa_accepts / max(1, fa_attempts),
                    "mean_overlap": fa_overlap_sum / max(1, fa_accepts),
                })
            if t % cfg.checkpoint_every == 0 or t == cfg.iterations:
                save_checkpoint(ckpt_path, net, opt, t, cfg, rngs)
                last_good = ckpt_path
    except TrainingAborted as exc:
        emit({"type": "abort", "message": str(exc),
              "last_checkpoint": str(last_good) if last_good else None})
        if log_fh is not None:
            log_fh.close()
        raise
    if log_fh is not None:
        log_fh.close()
    return TrainResult(records, ckpt_path, net)


# ---------------------------------------------------------------------------
# inference / evaluation
# ---------------------------------------------------------------------------


def _window_positions(dim: int, win: int, stride: int) -> list[int]:
    pos = list(range(0, dim - win + 1, stride))
    if pos[-1] != dim - win:
        pos.append(dim - win)
    return pos


def predict_volume(net: UNet, vol: Volume, cfg: RunConfig) -> np.ndarray:
    """Sliding-window inference with mean-logit fusion and argmax labeling."""
    win, stride = cfg.eval_window, cfg.eval_stride
    dims = vol.intensities.shape
    if win % 8:
        raise ConfigError(f"eval_window {win} must be divisible by 8")
    if any(d < win for d in dims):
        raise ConfigError(f"volume dims {dims} smaller than eval window {win}")
    logits = np.zeros((cfg.num_classes,) + dims, dtype=_f32)
    counts = np.zeros(dims, dtype=_f32)
    was_training = net.training
    net.set_training(False)
    for zd in _window_positions(dims[0], win, stride):
        for zh in _window_positions(dims[1], win, stride):
            for zw in _window_positions(dims[2], win, stride):
                sl = (slice(zd, zd + win), slice(zh, zh + win), slice(zw, zw + win))
                x = Tensor(np.ascontiguousarray(vol.intensities[sl])[None])
                out = net.forward(x, flfe_enabled=cfg.flfe)
                logits[(slice(None),) + sl] += out.seg_logits.data
                counts[sl] += 1.0
    net.set_training(was_training)
    return np.argmax(logits / counts[None], axis=0).astype(np.uint8)


def evaluate_volumes(net: UNet, volumes: list[Volume], cfg: RunConfig) -> tuple[list[MetricsReport], dict]:
    reports = []
    for vol in volumes:
        pred = predict_volume(net, vol, cfg)
        reports.append(
            evaluate_metrics(pred, vol.labels, vol.spacing_mm, cfg.num_classes)
        )
    return reports, aggregate_reports(reports)


def load_network(ckpt_path, cfg: RunConfig) -> UNet:
    rngs = make_rngs(cfg.seed)
    net = build_network(cfg, rngs["init"])
    header, arrays = E.load_tensors(ckpt_path, with_header=True)
    net.load_state_arrays(arrays)
    return net


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_PARAMETERS = ("alpha", "wavelet", "bg_size")


def sweep(
    cfg: RunConfig,
    parameter: str,
    values: list,
    train_volumes: list[Volume],
    test_volumes: list[Volume],
    csv_path: str | Path,
) -> list[dict]:
    """Train one run per value with a shared seed and emit per-class Dice rows.

    Rows are flushed to the CSV as they finish so a failed run preserves the
    partial table.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMETERS}")
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    classes = list(range(1, cfg.num_classes))
    header = ["value"] + [f"dice_mean_c{c}" for c in classes] + [f"dice_std_c{c}" for c in classes]
    rows: list[dict] = []
    with open(csv_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        fh.flush()
        for value in values:
            if parameter == "bg_size":
                run_cfg = replace(cfg, bg_size=int(value))
            elif parameter == "alpha":
                run_cfg = replace(cfg, alpha=float(value))
            else:
                run_cfg = replace(cfg, wavelet=str(value))
            run_cfg = replace(run_cfg, out_dir=str(Path(cfg.out_dir) / f"{parameter}_{value}"))
            result = train(run_cfg, volumes=train_volumes)
            _, agg = evaluate_volumes(result.net, test_volumes, run_cfg)
            row = {"value": value}
            cells = [str(value)]
            for c in classes:
                row[f"dice_mean_c{c}"] = agg["per_class"][str(c)]["dice"]["mean"]
                row[f"dice_std_c{c}"] = agg["per_class"][str(c)]["dice"]["std"]
            cells += [f"{row[f'dice_mean_c{c}']:.4f}" for c in classes]
            cells += [f"{row[f'dice_std_c{c}']:.4f}" for c in classes]
            fh.write(",".join(cells) + "\n")
            fh.flush()
            rows.append(row)
    return rows
