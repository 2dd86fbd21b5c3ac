"""Joint objective, teacher/student training loop, and the evaluation sweep.

The teacher always sees the full four-modality input and never touches the
adapter bank or the graph refinement. The student sees a masked input drawn
uniformly from the 15 combinations, runs its adapters, and refines its
bottleneck through the graph module before decoding.

Because the fused combination features need the decoder-slot adapter outputs
*before* the refinement runs, the student decodes twice per step: a
preliminary pass from the raw bottleneck harvests all seven adapter deltas,
then the final pass decodes from the refined bottleneck.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .backbone import Backbone, BackboneConfig, FeatureBundle
from .bbdm import Discriminator, adversarial_loss, bbdm_loss, discriminator_bce, gram_triple, gsme_loss
from .garm import GarmModule
from .lgrm import PresenceHead, gate_segmentation, lgrm_loss
from .metrics import (
    METRIC_NAMES,
    REGION_NAMES,
    MetricsRecord,
    RegionMetrics,
    evaluate_case,
    sweep_aggregate,
)
from .volumes import (
    LabelVolume,
    ModalityCombination,
    MultiModalVolume,
    enumerate_combinations,
    load_volume,
    normalize_intensity,
    save_volume,
    synth_case,
)


class ConfigError(ValueError):
    """Raised for malformed or inconsistent training configuration."""


class NumericalAbort(RuntimeError):
    """Raised when the joint loss turns non-finite; carries the breakdown."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown or {}


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda_adv: float = 1.0
    theta: float = 1.0
    lr_init: float = 1e-4
    lr_final: float = 1e-5
    epochs: int = 1
    batch_size: int = 1
    patch_size: int = 24
    seed: int = 0
    bbdm: bool = True
    garm: bool = True
    lgrm: bool = True
    K: int = 8
    tau: float = 0.8
    base_channels: int = 8
    adapter_reduction: int = 2
    augment: bool = True
    pretrain_teacher_epochs: int = 0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda_adv", "theta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.lr_final > self.lr_init:
            raise ConfigError("lr_final must not exceed lr_init")
        if self.batch_size != 1:
            raise ConfigError("batch_size is fixed at 1")
        if self.epochs < 1 or self.patch_size < 8 or self.K < 2:
            raise ConfigError("epochs >= 1, patch_size >= 8, K >= 2 required")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class AdammModel(nn.Module):
    """Teacher + student backbones with the refinement, presence, and critic heads."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        bcfg = BackboneConfig(
            base_channels=cfg.base_channels, adapter_reduction=cfg.adapter_reduction
        )
        self.cfg = cfg
        self.teacher = Backbone(bcfg, with_adapters=False)
        self.student = Backbone(bcfg, with_adapters=True)
        self.garm = GarmModule(bcfg.bottleneck_channels, num_anchors=cfg.K, tau=cfg.tau)
        self.discriminator = Discriminator(bcfg.bottleneck_channels)
        self.presence_head = PresenceHead(2 * cfg.base_channels)

    def main_parameters(self):
        """Everything the joint objective optimizes (the critic is separate)."""
        return [p for n, p in self.named_parameters() if not n.startswith("discriminator.")]

    def named_main_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("discriminator.")]

    def named_disc_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith("discriminator.")]


@dataclass
class BranchOutput:
    bundle: FeatureBundle
    probs: torch.Tensor  # sigmoid of logits, (B, 3, D, H, W)
    presence: torch.Tensor  # (B, 3)
    raw_bottleneck: torch.Tensor
    garm_feature: torch.Tensor  # refined bottleneck (or raw when refinement is off)


FULL_COMBO = ModalityCombination.from_code("1111")


def run_teacher(model: AdammModel, x: torch.Tensor) -> BranchOutput:
    bundle = model.teacher.encode(x, FULL_COMBO, use_adapters=False)
    bundle = model.teacher.decode(bundle, FULL_COMBO, use_adapters=False)
    return BranchOutput(
        bundle=bundle,
        probs=torch.sigmoid(bundle.logits),
        presence=model.presence_head(bundle.u2),
        raw_bottleneck=bundle.bottleneck,
        garm_feature=bundle.bottleneck,
    )


def run_student(model: AdammModel, x_masked: torch.Tensor, combo: ModalityCombination,
                use_garm: bool = True) -> BranchOutput:
    enc = model.student.encode(x_masked, combo, use_adapters=True)
    raw_bottleneck = enc.bottleneck
    if use_garm:
        harvest = enc
        if not combo.is_full:
            # Preliminary decode only to collect the decoder-slot adapter deltas.
            harvest = model.student.decode(enc, combo, use_adapters=True)
        cf = model.student.combination_features(harvest, combo)
        refined = model.garm(raw_bottleneck, cf)
        final = model.student.decode(
            dataclasses.replace(enc, bottleneck=refined), combo, use_adapters=True
        )
        garm_feature = refined
    else:
        final = model.student.decode(enc, combo, use_adapters=True)
        garm_feature = raw_bottleneck
    return BranchOutput(
        bundle=final,
        probs=torch.sigmoid(final.logits),
        presence=model.presence_head(final.u2),
        raw_bottleneck=raw_bottleneck,
        garm_feature=garm_feature,
    )


def joint_loss(model: AdammModel, teacher: BranchOutput, student: BranchOutput,
               target: torch.Tensor, y_cls: torch.Tensor, cfg: TrainConfig):
    """Weighted sum of voxel distillation, bottleneck distillation, and presence terms.

    Teacher features and probabilities are detached everywhere except the
    full-branch presence/Dice supervision, so the teacher is trained only by
    its own segmentation terms.

    Returns (total, breakdown) with raw (unweighted) component values.
    """
    zero = torch.zeros((), dtype=student.probs.dtype, device=student.probs.device)
    l_mse = F.mse_loss(student.probs, teacher.probs.detach())

    if cfg.bbdm:
        t_triple = gram_triple(
            teacher.bundle.enc_fused[0].detach(),
            teacher.raw_bottleneck[0].detach(),
            teacher.bundle.dec_first[0].detach(),
        )
        s_triple = gram_triple(
            student.bundle.enc_fused[0], student.raw_bottleneck[0], student.bundle.dec_first[0]
        )
        l_gsme = gsme_loss(t_triple, s_triple, cfg.theta)
        d_teacher = model.discriminator(teacher.raw_bottleneck.detach())
        d_student = model.discriminator(student.garm_feature)
        l_adv = adversarial_loss(d_teacher, d_student)
        l_bbdm = bbdm_loss(l_adv, l_gsme, cfg.lambda_adv, cfg.theta)
    else:
        l_adv = l_gsme = l_bbdm = zero

    if cfg.lgrm:
        l_lgrm, _ = lgrm_loss(
            teacher.probs, teacher.presence, student.probs, student.presence, target, y_cls
        )
    else:
        l_lgrm = zero

    total = cfg.lambda1 * l_mse + cfg.lambda2 * l_bbdm + cfg.lambda3 * l_lgrm
    breakdown = {
        "mse": float(l_mse.detach()),
        "bbdm": float(l_bbdm.detach()),
        "lgrm": float(l_lgrm.detach()),
        "adv": float(l_adv.detach()),
        "gsme": float(l_gsme.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown


def sample_combo(rng: np.random.Generator) -> ModalityCombination:
    """Uniform draw over the 15 non-empty combinations."""
    combos = enumerate_combinations()
    return combos[int(rng.integers(0, len(combos)))]


@dataclass
class Case:
    name: str
    image: np.ndarray  # normalized (4, D, H, W) float32
    labels: np.ndarray  # (3, D, H, W) float32
    spacing: tuple = (1.0, 1.0, 1.0)


def make_synthetic_dataset(num_cases: int, size, seed: int = 0) -> list:
    """Generate and normalize phantoms entirely in memory."""
    cases = []
    for i in range(num_cases):
        vol, labels = synth_case(seed + i, size)
        vol = normalize_intensity(vol)
        cases.append(Case(f"case_{i:03d}", vol.data, labels.classes, vol.spacing))
    return cases


def write_synthetic_dataset(out_dir, num_cases: int, size, seed: int = 0) -> list:
    """Write raw (un-normalized) phantom pairs as .vol/.json files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(num_cases):
        vol, labels = synth_case(seed + i, size)
        name = f"case_{i:03d}"
        save_volume(out_dir / f"{name}_img", vol)
        save_volume(out_dir / f"{name}_lbl", labels)
        names.append(name)
    return names


def load_dataset(data_dir) -> list:
    """Load every `<name>_img.vol` / `<name>_lbl.vol` pair, normalized."""
    data_dir = Path(data_dir)
    cases = []
    for img_path in sorted(data_dir.glob("*_img.vol")):
        name = img_path.name[: -len("_img.vol")]
        lbl_path = data_dir / f"{name}_lbl.vol"
        if not lbl_path.exists():
            raise FileNotFoundError(f"missing labels for {name}")
        vol = load_volume(img_path)
        labels = load_volume(lbl_path)
        if not isinstance(vol, MultiModalVolume) or not isinstance(labels, LabelVolume):
            raise ValueError(f"case {name} has mismatched sidecar kinds")
        vol = normalize_intensity(vol)
        cases.append(Case(name, vol.data, labels.classes, vol.spacing))
    if not cases:
        raise FileNotFoundError(f"no cases found under {data_dir}")
    return cases


_ROT_AXES = ((1, 2), (1, 3), (2, 3))


def augment_case(rng: np.random.Generator, image: np.ndarray, labels: np.ndarray,
                 patch_size: int):
    """Random crop to the patch size, axis flips, and a 90-degree rotation.

    The same transform hits image and labels; both branches of a step share
    the result (masking happens afterwards).
    """
    dims = image.shape[1:]
    starts = [int(rng.integers(0, d - patch_size + 1)) if d > patch_size else 0 for d in dims]
    sl = tuple(slice(s, s + min(patch_size, d)) for s, d in zip(starts, dims))
    image = image[(slice(None),) + sl]
    labels = labels[(slice(None),) + sl]
    for axis in (1, 2, 3):
        if rng.random() < 0.5:
            image = np.flip(image, axis=axis)
            labels = np.flip(labels, axis=axis)
    axes = _ROT_AXES[int(rng.integers(0, 3))]
    k = int(rng.integers(0, 4))
    if image.shape[axes[0]] == image.shape[axes[1]] or k % 2 == 0:
        image = np.rot90(image, k, axes=axes)
        labels = np.rot90(labels, k, axes=axes)
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: AdammModel
    opt_main: torch.optim.Adam
    opt_disc: torch.optim.Adam
    rng: np.random.Generator
    step: int
    total_steps: int
    case_queue: list = field(default_factory=list)


def init_state(cfg: TrainConfig, num_cases: int) -> TrainState:
    """Build a fresh, fully seeded training state."""
    torch.manual_seed(cfg.seed)
    model = AdammModel(cfg)
    opt_main = torch.optim.Adam(model.main_parameters(), lr=cfg.lr_init)
    opt_disc = torch.optim.Adam(
        [p for _, p in model.named_disc_parameters()], lr=cfg.lr_init
    )
    rng = np.random.default_rng(cfg.seed)
    return TrainState(
        cfg=cfg,
        model=model,
        opt_main=opt_main,
        opt_disc=opt_disc,
        rng=rng,
        step=0,
        total_steps=cfg.epochs * num_cases,
    )


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear decay from lr_init to lr_final across the whole run."""
    if total_steps <= 1:
        return cfg.lr_init
    frac = min(step, total_steps - 1) / (total_steps - 1)
    return cfg.lr_init + (cfg.lr_final - cfg.lr_init) * frac


def _prepare_step_tensors(state: TrainState, case: Case, combo: ModalityCombination):
    cfg = state.cfg
    image, labels = case.image, case.labels
    if cfg.augment:
        image, labels = augment_case(state.rng, image, labels, cfg.patch_size)
    x_full = torch.from_numpy(image).unsqueeze(0)
    target = torch.from_numpy(labels).unsqueeze(0)
    y_cls = (target.flatten(2).amax(-1) > 0).float()
    x_miss = x_full.clone()
    for ch, present in enumerate(combo.present):
        if not present:
            x_miss[:, ch] = 0.0
    return x_full, x_miss, target, y_cls


def train_step(state: TrainState, case: Case, combo: ModalityCombination,
               phase: str = "joint") -> dict:
    """One optimization step: critic update, then a joint-loss update.

    ``phase`` selects the regime: "joint" trains both branches end to end,
    "teacher_pretrain" updates only the teacher on its own segmentation and
    presence terms, "student_distill" runs the full objective with the
    teacher frozen. Mutates the state in place and returns the logged loss
    breakdown. Raises NumericalAbort when any component turns non-finite.
    """
    if phase not in ("joint", "teacher_pretrain", "student_distill"):
        raise ValueError(f"unknown training phase {phase!r}")
    cfg = state.cfg
    model = state.model
    model.train()
    x_full, x_miss, target, y_cls = _prepare_step_tensors(state, case, combo)

    lr = lr_at(cfg, state.step, state.total_steps)
    for opt in (state.opt_main, state.opt_disc):
        for group in opt.param_groups:
            group["lr"] = lr

    teacher = run_teacher(model, x_full)

    if phase == "teacher_pretrain":
        total, _ = lgrm_loss(
            teacher.probs, teacher.presence, None, None, target, y_cls, include_miss=False
        )
        breakdown = {
            "mse": 0.0, "bbdm": 0.0, "lgrm": float(total.detach()), "adv": 0.0,
            "gsme": 0.0, "total": float(total.detach()), "disc_bce": 0.0, "lr": lr,
        }
        if not np.isfinite(breakdown["total"]):
            raise NumericalAbort(f"non-finite loss at step {state.step}", breakdown)
        state.opt_main.zero_grad()
        total.backward()
        state.opt_main.step()
        state.step += 1
        return breakdown

    student = run_student(model, x_miss, combo, use_garm=cfg.garm)

    disc_bce = 0.0
    if cfg.bbdm:
        d_t = model.discriminator(teacher.raw_bottleneck.detach())
        d_s = model.discriminator(student.garm_feature.detach())
        bce = discriminator_bce(d_t, d_s)
        state.opt_disc.zero_grad()
        bce.backward()
        state.opt_disc.step()
        disc_bce = float(bce.detach())

    total, breakdown = joint_loss(model, teacher, student, target, y_cls, cfg)
    breakdown["disc_bce"] = disc_bce
    breakdown["lr"] = lr
    if not all(np.isfinite(v) for v in breakdown.values()):
        raise NumericalAbort(f"non-finite loss at step {state.step}", breakdown)

    state.opt_main.zero_grad()
    total.backward()
    if phase == "student_distill":
        for _, p in model.teacher.named_parameters():
            p.grad = None
    state.opt_main.step()
    state.step += 1
    return breakdown


def _next_case_index(state: TrainState, num_cases: int) -> int:
    if not state.case_queue:
        state.case_queue = [int(i) for i in state.rng.permutation(num_cases)]
    return state.case_queue.pop(0)


def train(state: TrainState, dataset: list, max_steps: int = None, log=None) -> list:
    """Run the loop until ``total_steps`` (or ``max_steps`` more), returning breakdowns.

    ``log`` is an optional callable invoked with each step's breakdown dict.
    """
    cfg = state.cfg
    history = []
    pretrain_until = cfg.pretrain_teacher_epochs * len(dataset)
    stop_at = state.total_steps if max_steps is None else min(
        state.total_steps, state.step + max_steps
    )
    while state.step < stop_at:
        idx = _next_case_index(state, len(dataset))
        combo = sample_combo(state.rng)
        if pretrain_until <= 0:
            phase = "joint"
        elif state.step < pretrain_until:
            phase = "teacher_pretrain"
        else:
            phase = "student_distill"
        breakdown = train_step(state, dataset[idx], combo, phase=phase)
        breakdown["step"] = state.step
        breakdown["case"] = dataset[idx].name
        breakdown["combination"] = combo.code
        history.append(breakdown)
        if log is not None:
            log(breakdown)
    return history


LOG_COLUMNS = ("step", "lr", "total", "mse", "bbdm", "lgrm", "disc_bce")


def format_log_row(breakdown: dict) -> str:
    return ",".join(
        str(breakdown[c]) if c == "step" else f"{breakdown[c]:.6g}" for c in LOG_COLUMNS
    )


def save_checkpoint(path, state: TrainState) -> Path:
    """Serialize parameters, optimizer moments, RNG, and loop position."""
    arrays = {}
    for name, tensor in state.model.state_dict().items():
        arrays[f"model.{name}"] = tensor.detach().cpu().numpy()
    for opt_name, opt, named in (
        ("opt_main", state.opt_main, state.model.named_main_parameters()),
        ("opt_disc", state.opt_disc, state.model.named_disc_parameters()),
    ):
        for pname, param in named:
            st = opt.state.get(param)
            if not st:
                continue
            arrays[f"{opt_name}.{pname}.step"] = np.asarray(st["step"].detach().cpu())
            arrays[f"{opt_name}.{pname}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
            arrays[f"{opt_name}.{pname}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
    meta = {
        "format": "adamm-checkpoint",
        "step": state.step,
        "total_steps": state.total_steps,
        "case_queue": list(state.case_queue),
        "rng_state": state.rng.bit_generator.state,
        "config": state.cfg.to_dict(),
    }
    return ckpt.save_arrays(path, arrays, meta)


def load_checkpoint(path) -> TrainState:
    """Rebuild a TrainState that continues bit-identically."""
    arrays, meta = ckpt.load_arrays(path)
    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(cfg, num_cases=1)
    state.total_steps = int(meta["total_steps"])
    state.step = int(meta["step"])
    state.case_queue = [int(i) for i in meta["case_queue"]]
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = meta["rng_state"]

    model_arrays = {
        name[len("model."):]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("model.")
    }
    state.model.load_state_dict(model_arrays, strict=True)
    for opt_name, opt, named in (
        ("opt_main", state.opt_main, state.model.named_main_parameters()),
        ("opt_disc", state.opt_disc, state.model.named_disc_parameters()),
    ):
        for pname, param in named:
            key = f"{opt_name}.{pname}.step"
            if key not in arrays:
                continue
            opt.state[param] = {
                "step": torch.from_numpy(arrays[key].copy()).reshape(()),
                "exp_avg": torch.from_numpy(arrays[f"{opt_name}.{pname}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"{opt_name}.{pname}.exp_avg_sq"].copy()),
            }
    return state


def infer_case(model: AdammModel, case: Case, combo: ModalityCombination,
               use_garm: bool = True, gate: bool = True) -> np.ndarray:
    """Student inference on one case: masked forward, optional existence gating."""
    model.eval()
    with torch.no_grad():
        # copy: from_numpy shares memory and masking must not touch the case
        x = torch.from_numpy(case.image.copy()).unsqueeze(0)
        for ch, present in enumerate(combo.present):
            if not present:
                x[:, ch] = 0.0
        out = run_student(model, x, combo, use_garm=use_garm)
        probs = out.probs
        if gate:
            probs = gate_segmentation(probs, out.presence)
    return probs[0].cpu().numpy()


def _mean_record(records: list) -> MetricsRecord:
    region_stats = {}
    for region in REGION_NAMES:
        values = {}
        for metric in METRIC_NAMES:
            col = np.array([getattr(r.region(region), metric) for r in records])
            defined = col[~np.isnan(col)]
            values[metric] = float(defined.mean()) if defined.size else float("nan")
        region_stats[region.lower()] = RegionMetrics(**values)
    return MetricsRecord(**region_stats)


def eval_sweep(model: AdammModel, dataset: list, use_garm: bool = True, gate: bool = True,
               hd95_method: str = "pooled"):
    """Evaluate every combination over the dataset.

    Returns (SweepTable, per_case_rows); each row is a dict with the case
    name, combination code, region, and the four metric values.
    """
    per_case = []
    combo_records = {}
    for combo in enumerate_combinations():
        records = []
        for case in dataset:
            probs = infer_case(model, case, combo, use_garm=use_garm, gate=gate)
            record = evaluate_case(
                probs, LabelVolume(case.labels), spacing=case.spacing, hd95_method=hd95_method
            )
            records.append(record)
            for region in REGION_NAMES:
                m = record.region(region)
                per_case.append(
                    {
                        "case": case.name,
                        "combination": combo.code,
                        "region": region,
                        **{metric: getattr(m, metric) for metric in METRIC_NAMES},
                    }
                )
        combo_records[combo.code] = _mean_record(records)
    return sweep_aggregate(combo_records), per_case


def per_case_csv(rows: list) -> str:
    header = "case,combination,region," + ",".join(METRIC_NAMES)
    lines = [header]
    for row in rows:
        # shortest exact round-trip floats, so offline re-aggregation is lossless
        lines.append(
            f"{row['case']},{row['combination']},{row['region']},"
            + ",".join(repr(float(row[m])) for m in METRIC_NAMES)
        )
    return "\n".join(lines) + "\n"
