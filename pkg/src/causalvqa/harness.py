"""Experiment harness: run configs, the training loop, accuracy metrics
split by question type, the seen/unseen intervention robustness protocol,
the answer-video shortcut probe, and artifact writers.

Everything is driven by one JSON config and one seed; reruns with the
same config produce byte-identical metrics and curves.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import nn_core as nc
from .features import (
    Qtype,
    SyntheticSpec,
    VideoQAInstance,
    generate_synthetic,
    load_causal_masks,
    load_dataset,
    load_saliency,
)
from .intervention import (
    CausalSplit,
    DegenerateSplitError,
    InfoNceGrads,
    InterventionConfig,
    MemorySource,
    build_triplet_cached,
    gate_backward,
    gate_forward,
    infonce_loss,
    mixup_intervene,
    assemble_video,
    split_from_gates,
    triplet_backward,
)
from .mnse import MemoryBank, Metric, Regime, Target, instance_scenes, mnse_do, random_do
from .pcma import PcmaConfig, PcmaModel, pcma_loss
from . import samplers as sm

Array = np.ndarray

METRICS_VERSION = 1
CURVE_HEADER = "step,erm_loss,cl_loss,total_loss"
OUTPUT_DIR_ENV = "CAUSALVQA_OUTPUT_DIR"


class ConfigError(ValueError):
    """Carries one message per invalid config field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# -- optimizer ---------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    steps: int = 300
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        problems = []
        if not (np.isfinite(self.lr) and self.lr >= 0):
            problems.append("lr must be finite and nonnegative")
        if self.steps < 0:
            problems.append("steps must be nonnegative")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("Adam betas must lie in [0, 1)")
        if problems:
            raise ValueError("; ".join(problems))


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self) -> None:
        self.t = 0
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}


def adam_step(store: nc.ParamStore, state: AdamState, cfg: OptimizerConfig) -> None:
    """One bias-corrected Adam update over every parameter in the store."""
    state.t += 1
    for name in store.names():
        g = store.grad(name)
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        if cfg.lr == 0.0:
            continue  # parameters must stay bit-identical
        mhat = m / (1.0 - cfg.beta1**state.t)
        vhat = v / (1.0 - cfg.beta2**state.t)
        param = store[name]
        param -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


# -- experiment config ---------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    synthetic: SyntheticSpec | None = None
    manifest: str | None = None

    def __post_init__(self) -> None:
        if (self.synthetic is None) == (self.manifest is None):
            raise ValueError("exactly one of synthetic | manifest must be set")


@dataclass(frozen=True)
class BankConfig:
    regime: Regime = Regime.F2_DYNAMIC
    metric: Metric = Metric.COSINE
    window: int = 8

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    """Backbone hyperparameters; feature dims come from the dataset."""

    model_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    tau: float = 0.1
    answer_conditioning: bool = False
    seed: int = 0

    def pcma(self, video_dim: int, text_dim: int) -> PcmaConfig:
        return PcmaConfig(
            video_dim=video_dim,
            text_dim=text_dim,
            model_dim=self.model_dim,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            tau=self.tau,
            answer_conditioning=self.answer_conditioning,
            seed=self.seed,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    intervention: InterventionConfig | None = None
    bank: BankConfig = field(default_factory=BankConfig)
    use_oracle_masks: bool = False
    output_dir: str | None = None

    @property
    def contrastive(self) -> bool:
        return self.intervention is not None and self.intervention.beta_cl > 0.0


def load_data(
    cfg: DataConfig,
) -> tuple[list[VideoQAInstance], list | None, Array | None]:
    """Instances plus optional saliency and causal-mask sidecars."""
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    instances = load_dataset(cfg.manifest)
    return instances, load_saliency(cfg.manifest), load_causal_masks(cfg.manifest)


# -- config parsing (JSON dict -> ExperimentConfig) -----------------------------


def parse_experiment_config(raw: dict) -> ExperimentConfig:
    """Build a validated config from a JSON dict.

    Collects one message per invalid field and reports them all at once.
    """
    problems: list[str] = []

    def build(section: str, factory: Callable, kwargs: dict):
        try:
            return factory(**kwargs)
        except (TypeError, ValueError) as exc:
            problems.append(f"{section}: {exc}")
            return None

    data_raw = raw.get("data")
    data = None
    if not isinstance(data_raw, dict):
        problems.append("data: required section with synthetic | manifest")
    elif "synthetic" in data_raw:
        spec = build("data.synthetic", SyntheticSpec, dict(data_raw["synthetic"]))
        data = build("data", DataConfig, {"synthetic": spec}) if spec else None
    elif "manifest" in data_raw:
        data = build("data", DataConfig, {"manifest": str(data_raw["manifest"])})
    else:
        problems.append("data: needs synthetic | manifest")

    model = build("model", ModelConfig, dict(raw.get("model", {})))
    optimizer = build("optimizer", OptimizerConfig, dict(raw.get("optimizer", {})))

    intervention = None
    if "intervention" in raw:
        ikw = dict(raw["intervention"])
        if "memory_source" in ikw:
            try:
                ikw["memory_source"] = MemorySource(ikw["memory_source"])
            except ValueError:
                problems.append(
                    f"intervention.memory_source: unknown {ikw['memory_source']!r}"
                )
                ikw.pop("memory_source")
        intervention = build("intervention", InterventionConfig, ikw)

    bkw = dict(raw.get("bank", {}))
    for enum_key, enum_cls in (("regime", Regime), ("metric", Metric)):
        if enum_key in bkw:
            try:
                bkw[enum_key] = enum_cls(bkw[enum_key])
            except ValueError:
                problems.append(f"bank.{enum_key}: unknown {bkw[enum_key]!r}")
                bkw.pop(enum_key)
    bank = build("bank", BankConfig, bkw)

    use_oracle = raw.get("use_oracle_masks", False)
    if not isinstance(use_oracle, bool):
        problems.append("use_oracle_masks: expected true/false")
        use_oracle = False
    output_dir = raw.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        problems.append("output_dir: expected string path")
        output_dir = None

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        data=data,
        model=model,
        optimizer=optimizer,
        intervention=intervention,
        bank=bank,
        use_oracle_masks=use_oracle,
        output_dir=output_dir,
    )


# -- metrics ---------------------------------------------------------------------


class CurveRow(NamedTuple):
    step: int
    erm_loss: float
    cl_loss: float
    total_loss: float


QTYPE_NAMES = {Qtype.CAUSAL: "causal", Qtype.TEMPORAL: "temporal", Qtype.DESCRIPTIVE: "descriptive"}


@dataclass(frozen=True)
class MetricsReport:
    """Accuracy by question type plus run artifacts.

    overall is always the count-weighted mean of the per-type accuracies;
    a type with zero instances reports None, never 0.
    """

    counts: dict[str, int]
    corrects: dict[str, int]
    curves: tuple[CurveRow, ...] = ()
    deltas: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, correct in self.corrects.items():
            if not 0 <= correct <= self.counts.get(name, 0):
                raise ValueError(f"corrects[{name}] out of range")

    @property
    def n_total(self) -> int:
        return sum(self.counts.values())

    @property
    def overall(self) -> float:
        if self.n_total == 0:
            raise ValueError("empty report has no overall accuracy")
        return sum(self.corrects.values()) / self.n_total

    def acc(self, name: str) -> float | None:
        if self.counts.get(name, 0) == 0:
            return None
        return self.corrects[name] / self.counts[name]

    @property
    def acc_causal(self) -> float | None:
        return self.acc("causal")

    @property
    def acc_temporal(self) -> float | None:
        return self.acc("temporal")

    @property
    def acc_descriptive(self) -> float | None:
        return self.acc("descriptive")

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "acc_causal": self.acc_causal,
            "acc_temporal": self.acc_temporal,
            "acc_descriptive": self.acc_descriptive,
            "counts": dict(self.counts),
            "corrects": dict(self.corrects),
            "deltas": dict(self.deltas),
        }


def _report_from_predictions(
    instances: Sequence[VideoQAInstance],
    predictions: Sequence[int],
    curves: tuple[CurveRow, ...] = (),
    deltas: dict[str, float] | None = None,
) -> MetricsReport:
    counts = {name: 0 for name in QTYPE_NAMES.values()}
    corrects = {name: 0 for name in QTYPE_NAMES.values()}
    for inst, pred in zip(instances, predictions):
        name = QTYPE_NAMES[Qtype(inst.qtype)]
        counts[name] += 1
        corrects[name] += int(pred == inst.gold)
    return MetricsReport(
        counts=counts, corrects=corrects, curves=curves, deltas=deltas or {}
    )


def evaluate(
    model: PcmaModel,
    instances: Sequence[VideoQAInstance],
    videos: Sequence[Array] | None = None,
) -> MetricsReport:
    """Argmax-score accuracy per question type; videos can be overridden
    row-for-row to evaluate under interventions."""
    predictions = []
    for i, inst in enumerate(instances):
        video = inst.video.astype(np.float64) if videos is None else nc.as_f64(videos[i])
        result, _ = model.forward_full(
            video, inst.question.astype(np.float64), inst.answers.astype(np.float64)
        )
        predictions.append(result.predicted)
    return _report_from_predictions(instances, predictions)


# -- training ---------------------------------------------------------------------


class TrainResult(NamedTuple):
    model: PcmaModel
    report: MetricsReport
    bank: MemoryBank | None


def _batch_order(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index batches forever, reshuffling whenever an epoch runs dry."""
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        yield [int(i) for i in order[pos : pos + min(batch_size, n)]]
        pos += batch_size


def _split_for(
    model: PcmaModel,
    inst: VideoQAInstance,
    icfg: InterventionConfig,
    oracle_mask: Array | None,
) -> tuple[CausalSplit, dict | None]:
    """Causal split from the oracle mask when given, else from the learned
    gates (returning the gate cache for backprop)."""
    if oracle_mask is not None:
        mask = np.asarray(oracle_mask, dtype=bool)
        return CausalSplit(mask=mask, gates=mask.astype(np.float64)), None
    gates, cache = gate_forward(
        model, inst.video.astype(np.float64), inst.question.astype(np.float64)
    )
    return split_from_gates(gates, topk_mode=icfg.topk_mode, k=icfg.k), cache


def _scale_grads(store: nc.ParamStore, factor: float) -> None:
    for name in store.names():
        store.grad(name)[...] *= factor


def train(
    cfg: ExperimentConfig,
    dataset: tuple[list[VideoQAInstance], list | None, Array | None] | None = None,
) -> TrainResult:
    """Adam on the answering loss, plus the weighted contrastive loss when
    an intervention config with beta_cl > 0 is present.

    Deterministic given the config; aborts with the step number if the
    loss goes non-finite.
    """
    instances, _, masks = load_data(cfg.data) if dataset is None else dataset
    if not instances:
        raise ValueError("training needs at least one instance")
    if cfg.use_oracle_masks and masks is None:
        raise ConfigError(["use_oracle_masks: dataset has no causal-mask sidecar"])
    video_dim, text_dim = instances[0].video_dim, instances[0].text_dim
    model = PcmaModel(cfg.model.pcma(video_dim, text_dim))
    icfg = cfg.intervention
    use_cl = cfg.contrastive
    if use_cl and not cfg.use_oracle_masks:
        # touch the gate parameters up front so Adam state covers them
        gate_forward(model, instances[0].video.astype(np.float64),
                     instances[0].question.astype(np.float64))

    bank = None
    if use_cl:
        bank = MemoryBank(
            video_dim, metric=cfg.bank.metric, regime=cfg.bank.regime, window=cfg.bank.window
        )
        if cfg.bank.regime is Regime.F1_STATIC:
            bank.populate(instance_scenes(instances)).freeze()

    opt = cfg.optimizer
    state = AdamState()
    rng = np.random.default_rng(opt.seed)
    batches = _batch_order(len(instances), opt.batch_size, rng)
    curves: list[CurveRow] = []

    for step in range(opt.steps):
        try:
            batch = next(batches)
            store = model.store
            store.zero_grads()
            erm_sum = 0.0
            cl_sum = 0.0

            prepared = []
            if use_cl:
                mixup_rows: list[tuple[Array, str, int]] = []
                for j, i in enumerate(batch):
                    inst = instances[i]
                    partner = instances[batch[(j + 1) % len(batch)]]
                    split, gcache = _split_for(
                        model, inst, icfg, masks[i] if cfg.use_oracle_masks else None
                    )
                    psplit, _ = _split_for(
                        model, partner, icfg,
                        masks[batch[(j + 1) % len(batch)]] if cfg.use_oracle_masks else None,
                    )
                    try:
                        mix = mixup_intervene(inst, split, partner, psplit, icfg, rng)
                    except DegenerateSplitError:
                        prepared.append(None)
                        continue
                    v_star = assemble_video(split.mask, mix.c_star, mix.t_star)
                    prepared.append((inst, split, gcache, mix, v_star))
                    blend_id = f"{inst.video_id}+{mix.partner_id}"
                    for r in range(v_star.shape[0]):
                        mixup_rows.append((v_star[r], blend_id, r))
                if cfg.bank.regime is not Regime.F1_STATIC:
                    scenes = instance_scenes([instances[i] for i in batch])
                    bank.push_batch(
                        scenes,
                        mixup_rows if cfg.bank.regime is Regime.F3_DYNAMIC_MIXUP else None,
                    )

            for j, i in enumerate(batch):
                inst = instances[i]
                video_clean = inst.video.astype(np.float64)
                entry = prepared[j] if use_cl else None
                dgates_erm = None
                if entry is not None and entry[2] is not None:
                    # joint training: prediction consumes gate-weighted clip rows,
                    # so answering pressure teaches the gates which clips matter.
                    # Weights are mean-normalized: only relative gate values count,
                    # not the overall input scale.
                    gates_j = entry[1].gates
                    gbar = gates_j.mean()
                    weights = gates_j / gbar
                    erm, _, igrads = model.loss_and_grads(
                        weights[:, None] * video_clean,
                        inst.question.astype(np.float64),
                        inst.answers.astype(np.float64),
                        inst.gold,
                    )
                    dweights = (igrads.video * video_clean).sum(axis=1)
                    dgates_erm = (dweights - weights @ dweights / len(weights)) / gbar
                else:
                    erm, _, _ = model.loss_and_grads(
                        video_clean,
                        inst.question.astype(np.float64),
                        inst.answers.astype(np.float64),
                        inst.gold,
                    )
                erm_sum += erm
                if entry is None:
                    continue
                _, split, gcache, mix, v_star = entry
                # the intervened sample also carries the answering loss: the
                # mixed gold answer replaces the gold row at its position
                answers_aug = inst.answers.astype(np.float64)
                answers_aug[inst.gold] = mix.a_star
                erm_aug, _, _ = model.loss_and_grads(
                    v_star, mix.q_star, answers_aug, inst.gold
                )
                erm_sum += erm_aug
                # do-intervened sample: complement rows swapped for bank scenes,
                # gold unchanged, training the head itself to be invariant
                if icfg.memory_source is MemorySource.MNSE:
                    # early dynamic banks may hold fewer eligible scenes than
                    # the configured neighbor pool
                    eligible = sum(
                        1 for e in bank.entries()
                        if inst.video_id not in e.video_id.split("+")
                    )
                    v_do = mnse_do(
                        video_clean, split.mask, bank, Target.COMPLEMENT,
                        k=min(icfg.neighbor_k, eligible),
                        seed=int(rng.integers(2**32)),
                        exclude_video_id=inst.video_id,
                    )
                else:
                    v_do = random_do(
                        video_clean, split.mask, bank, Target.COMPLEMENT,
                        seed=int(rng.integers(2**32)), exclude_video_id=inst.video_id,
                    )
                erm_do, _, _ = model.loss_and_grads(
                    v_do, inst.question.astype(np.float64),
                    inst.answers.astype(np.float64), inst.gold,
                )
                erm_sum += erm_do
                r_idx = int(rng.integers(0, len(instances)))
                if len(instances) > 1 and r_idx == i:
                    r_idx = (r_idx + 1) % len(instances)
                q_r = instances[r_idx].question.astype(np.float64)
                answers = (
                    inst.answers.astype(np.float64) if model.cfg.answer_conditioning else None
                )
                triplet, tcache = build_triplet_cached(
                    model, v_star, mix.q_star, split, bank, q_r, icfg, rng,
                    exclude_video_id=inst.video_id, answers=answers,
                )
                cl, grads = infonce_loss(triplet)
                cl_sum += cl
                scaled = InfoNceGrads(
                    anchor=icfg.beta_cl * grads.anchor,
                    positive=icfg.beta_cl * grads.positive,
                    negatives=[icfg.beta_cl * g for g in grads.negatives],
                )
                dgates = triplet_backward(model, scaled, tcache)
                if gcache is not None:
                    gate_backward(model, dgates + dgates_erm, gcache)

            n_batch = len(batch)
            erm_mean = erm_sum / n_batch
            cl_mean = cl_sum / n_batch
            beta = icfg.beta_cl if use_cl else 0.0
            total = erm_mean + beta * cl_mean
            if not np.isfinite(total):
                raise nc.NumericsError("non-finite total loss")
            _scale_grads(store, 1.0 / n_batch)
            adam_step(store, state, opt)
            curves.append(CurveRow(step, float(erm_mean), float(cl_mean), float(total)))
        except nc.NumericsError as exc:
            raise nc.NumericsError(f"step {step}: {exc}") from None

    report = evaluate(model, instances)
    report = MetricsReport(
        counts=report.counts, corrects=report.corrects, curves=tuple(curves)
    )
    return TrainResult(model=model, report=report, bank=bank)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: PcmaModel, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.store.save(out / "params.json")
    (out / "model.json").write_text(
        json.dumps({"version": METRICS_VERSION, "pcma": asdict(model.cfg)},
                   sort_keys=True, indent=2)
        + "\n"
    )
    return out


def load_checkpoint(out_dir: str | Path) -> PcmaModel:
    out = Path(out_dir)
    meta = json.loads((out / "model.json").read_text())
    cfg = PcmaConfig(**meta["pcma"])
    store = nc.ParamStore.load(out / "params.json")
    return PcmaModel(cfg, store=store)


# -- seen/unseen robustness protocol ----------------------------------------------


class ProtocolResult(NamedTuple):
    clean: tuple[MetricsReport, MetricsReport]  # (model_a, model_b)
    seen: tuple[MetricsReport, MetricsReport]
    unseen: tuple[MetricsReport, MetricsReport]
    deltas: dict[str, float]


def _intervened_videos(
    instances: Sequence[VideoQAInstance],
    masks: Array,
    bank: MemoryBank,
    do: str,
    seed: int,
    k: int = 1,
) -> list[Array]:
    videos = []
    for i, inst in enumerate(instances):
        video = inst.video.astype(np.float64)
        if do == "mnse":
            out = mnse_do(video, masks[i], bank, Target.COMPLEMENT, k=k,
                          seed=seed * 1009 + i, exclude_video_id=inst.video_id)
        else:
            out = random_do(video, masks[i], bank, Target.COMPLEMENT,
                            seed=seed * 1009 + i, exclude_video_id=inst.video_id)
        videos.append(out)
    return videos


def seen_unseen_protocol(
    model_a: PcmaModel,
    model_b: PcmaModel,
    instances: Sequence[VideoQAInstance],
    masks: Array,
    bank: MemoryBank | None,
    seed: int = 0,
    neighbor_k: int = 1,
) -> ProtocolResult:
    """Cross-regime robustness: model A's intervener is nearest-scene
    replacement, model B's is random replacement. Seen = own intervener,
    unseen = the other's. Gold labels never change; only complement rows do.
    """
    if bank is None or len(bank) == 0:
        raise ValueError("protocol needs a populated memory bank")
    masks = np.asarray(masks, dtype=bool)
    mnse_videos = _intervened_videos(instances, masks, bank, "mnse", seed, neighbor_k)
    random_videos = _intervened_videos(instances, masks, bank, "random", seed)

    clean = (evaluate(model_a, instances), evaluate(model_b, instances))
    seen = (
        evaluate(model_a, instances, mnse_videos),
        evaluate(model_b, instances, random_videos),
    )
    unseen = (
        evaluate(model_a, instances, random_videos),
        evaluate(model_b, instances, mnse_videos),
    )
    deltas = {
        "drop_a_seen": clean[0].overall - seen[0].overall,
        "drop_b_seen": clean[1].overall - seen[1].overall,
        "drop_a_unseen": clean[0].overall - unseen[0].overall,
        "drop_b_unseen": clean[1].overall - unseen[1].overall,
    }
    return ProtocolResult(clean=clean, seen=seen, unseen=unseen, deltas=deltas)


def _reseeded(cfg: ExperimentConfig, offset: int) -> ExperimentConfig:
    data = cfg.data
    if data.synthetic is not None:
        data = replace(
            data, synthetic=replace(data.synthetic, seed=data.synthetic.seed + offset)
        )
    return replace(
        cfg,
        data=data,
        model=replace(cfg.model, seed=cfg.model.seed + offset),
        optimizer=replace(cfg.optimizer, seed=cfg.optimizer.seed + offset),
    )


def robustness_experiment(
    base: ExperimentConfig,
    seeds: Sequence[int],
    baseline: InterventionConfig | None = None,
    neighbor_k_eval: int = 5,
    protocol_seed: int = 0,
) -> dict:
    """Train an intervention-augmented model (A) and a baseline (B) across
    seeds, then compare accuracy drops under held-out replacement operators.

    A is scored on the operator it never trained with. A baseline with its
    own intervention operator is compared strictly on the operator unseen by
    it; a plain baseline (no intervention) never saw either operator, so its
    reference drop is the mean of its drops under both.
    """
    if base.intervention is None:
        raise ValueError("robustness_experiment needs an intervention config for model A")
    rows = []
    for s in seeds:
        cfg_a = _reseeded(base, int(s))
        cfg_b = replace(cfg_a, intervention=baseline)
        res_a = train(cfg_a)
        res_b = train(cfg_b)
        instances, _, masks = load_data(cfg_a.data)
        if masks is None:
            raise ValueError("robustness_experiment needs causal masks")
        proto = seen_unseen_protocol(
            res_a.model,
            res_b.model,
            instances,
            masks,
            res_a.bank,
            seed=protocol_seed,
            neighbor_k=neighbor_k_eval,
        )
        d = dict(proto.deltas)
        if baseline is None:
            d["drop_b_reference"] = 0.5 * (d["drop_b_seen"] + d["drop_b_unseen"])
        else:
            d["drop_b_reference"] = d["drop_b_unseen"]
        rows.append(
            {
                "seed": int(s),
                "clean_a": proto.clean[0].overall,
                "clean_b": proto.clean[1].overall,
                **d,
            }
        )
    mean_a = float(np.mean([r["drop_a_unseen"] for r in rows]))
    mean_ref = float(np.mean([r["drop_b_reference"] for r in rows]))
    return {
        "seeds": [int(s) for s in seeds],
        "baseline": "erm" if baseline is None else "intervention",
        "rows": rows,
        "mean_drop_intervened_unseen": mean_a,
        "mean_drop_baseline_reference": mean_ref,
        "mean_drop_baseline_unseen_strict": float(
            np.mean([r["drop_b_unseen"] for r in rows])
        ),
        "direction_holds": bool(mean_a <= mean_ref),
    }


# -- shortcut probe ----------------------------------------------------------------


def shortcut_probe(instances: Sequence[VideoQAInstance]) -> MetricsReport:
    """Parameter-free diagnostic: answer choice nearest (by cosine) to the
    mean video row. High accuracy exposes answer leakage into the video
    features."""
    predictions = []
    for inst in instances:
        center = inst.video.astype(np.float64).mean(axis=0)
        sims = [
            nc.cosine_similarity(center, inst.answers[i].astype(np.float64)).value
            for i in range(inst.answers.shape[0])
        ]
        predictions.append(int(np.argmax(sims)))
    return _report_from_predictions(instances, predictions)


# -- RL sampler training -------------------------------------------------------------


class RlTrainResult(NamedTuple):
    sampler: sm.RlSampler
    mean_selected_fraction: float
    mean_pred_loss: float
    all_frames_loss: float
    rewards: tuple[float, ...]


def _pred_loss(model: PcmaModel, inst: VideoQAInstance, selected: Sequence[int]) -> float:
    """Answering loss restricted to the selected clips; an empty selection
    scores as an uninformed uniform guess."""
    if len(selected) == 0:
        return float(np.log(inst.answers.shape[0]))
    video = inst.video.astype(np.float64)[sorted(selected)]
    result, _ = model.forward_full(
        video, inst.question.astype(np.float64), inst.answers.astype(np.float64)
    )
    loss, _ = pcma_loss(result, inst.gold, model.cfg.tau)
    return float(loss)


def rl_train(
    backbone: PcmaModel,
    sampler: sm.RlSampler,
    instances: Sequence[VideoQAInstance],
    episodes: int,
    opt: OptimizerConfig,
    baseline_decay: float = 0.9,
) -> RlTrainResult:
    """REINFORCE with a moving-average baseline; the backbone stays frozen.

    Reward: -pred_loss - gamma * selected fraction, granted at episode end.
    """
    rng = np.random.default_rng(opt.seed)
    state = AdamState()
    baseline = 0.0
    rewards: list[float] = []
    tail_frac: list[float] = []
    tail_loss: list[float] = []
    tail = max(1, episodes // 5)
    for ep_idx in range(episodes):
        inst = instances[int(rng.integers(0, len(instances)))]
        episode = sm.run_episode(
            sampler, inst.question.astype(np.float64), inst.video.astype(np.float64), rng
        )
        loss = _pred_loss(backbone, inst, episode.selected)
        reward = sm.s3_rl_reward(episode, loss, inst.n_clips, sampler.cfg.gamma)
        advantage = reward - baseline
        sampler.store.zero_grads()
        # descent on -advantage * log-likelihood = ascent on expected reward
        sm.reinforce_backward(sampler, episode, advantage)
        adam_step(sampler.store, state, opt)
        baseline = baseline_decay * baseline + (1.0 - baseline_decay) * reward
        rewards.append(reward)
        if ep_idx >= episodes - tail:
            tail_frac.append(episode.n_selected / max(1, inst.n_clips))
            tail_loss.append(loss)
    all_frames = float(
        np.mean([_pred_loss(backbone, inst, range(inst.n_clips)) for inst in instances])
    )
    return RlTrainResult(
        sampler=sampler,
        mean_selected_fraction=float(np.mean(tail_frac)),
        mean_pred_loss=float(np.mean(tail_loss)),
        all_frames_loss=all_frames,
        rewards=tuple(rewards),
    )


# -- artifacts -------------------------------------------------------------------


def resolve_output_dir(cfg_dir: str | None) -> Path:
    override = os.environ.get(OUTPUT_DIR_ENV)
    chosen = override or cfg_dir
    if not chosen:
        raise ConfigError(["output_dir: not set (config field or CAUSALVQA_OUTPUT_DIR)"])
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_metrics(payload: dict, path: str | Path) -> Path:
    path = Path(path)
    body = json.dumps({"version": METRICS_VERSION, **payload}, sort_keys=True, indent=2)
    path.write_text(body + "\n")
    return path


def write_curves(rows: Sequence[CurveRow], path: str | Path) -> Path:
    path = Path(path)
    lines = [CURVE_HEADER]
    for r in rows:
        lines.append(f"{r.step},{r.erm_loss!r},{r.cl_loss!r},{r.total_loss!r}")
    path.write_text("\n".join(lines) + "\n")
    return path
