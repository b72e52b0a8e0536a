"""Scene intervention and causal disruption over clip features.

A sigmoid gate splits each video into causal clips and their complement.
Two instances are blended by convex mixup (shared ratio for the causal
part, question and answer; an independent ratio for the complement), and
the blended video feeds a contrastive triplet: the anchor representation,
a positive with complement rows substituted from a memory bank, and
negatives built by substituting causal rows or swapping in a random
question. InfoNCE over raw dot products ties it together; the total
objective adds the contrastive term to the answering loss with weight
beta_cl.

Substitutions blend by gate confidence (a row with gate g keeps weight g
of itself in the positive and 1-g in the negatives), which is what makes
the gate scores trainable end to end; at saturated gates the blends
become the hard replacements they approximate.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from . import nn_core as nc
from .features import VideoQAInstance
from .mnse import MemoryBank, NeighborQuery
from .pcma import PcmaModel

Array = np.ndarray


class MemorySource(str, Enum):
    RANDOM_BANK = "random"
    MNSE = "mnse"


class DegenerateSplitError(RuntimeError):
    """A causal/complement split leaves a required partition empty."""


@dataclass(frozen=True)
class InterventionConfig:
    alpha: float = 1.0  # Beta(alpha, alpha) for the causal mixup ratio
    beta_cl: float = 1.0  # weight of the contrastive term in the total loss
    n_negatives: int = 4
    memory_source: MemorySource = MemorySource.MNSE
    topk_mode: bool = False
    k: int | None = None  # causal clips per video in top-k mode
    neighbor_k: int = 1  # top-k pool for nearest-scene sampling
    seed: int = 0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta_cl < 0:
            raise ValueError("beta_cl must be nonnegative")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if self.neighbor_k < 1:
            raise ValueError("neighbor_k must be >= 1")
        if self.topk_mode and (self.k is None or self.k < 1):
            raise ValueError("topk_mode requires k >= 1")


@dataclass(frozen=True)
class CausalSplit:
    mask: Array  # bool [n_clips], true = causal
    gates: Array  # float [n_clips] in (0, 1)

    def __post_init__(self) -> None:
        if self.mask.shape != self.gates.shape or self.mask.ndim != 1:
            raise ValueError("mask and gates must be same-length vectors")
        if self.mask.dtype != np.bool_:
            raise ValueError("mask must be boolean")

    @property
    def n_clips(self) -> int:
        return self.mask.shape[0]

    @property
    def causal_indices(self) -> Array:
        return np.flatnonzero(self.mask)

    @property
    def complement_indices(self) -> Array:
        return np.flatnonzero(~self.mask)


# -- gate scorer -------------------------------------------------------------


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def ensure_gate_params(model: PcmaModel) -> None:
    """Create the gate scorer parameters on the model's store once.

    The scorer weight and bias start at zero so initial gates are exactly
    0.5 everywhere.
    """
    if "gate.w" in model.store:
        return
    nc.init_mha_params(model.store, "gate.attn", model.cfg.model_dim)
    model.store.add_zeros("gate.w", (model.cfg.model_dim,))
    model.store.add_zeros("gate.b", (1,))


def gate_forward(model: PcmaModel, video: Array, question: Array) -> tuple[Array, dict]:
    """Per-clip gate scores in (0,1): sigmoid of a question-attended readout."""
    ensure_gate_params(model)
    cfg = model.cfg
    video = nc.as_f64(video)
    question = nc.as_f64(question)
    if video.ndim != 2 or video.shape[1] != cfg.video_dim:
        raise nc.DimMismatch(f"video shape {video.shape}, expected [*, {cfg.video_dim}]")
    if question.shape != (cfg.text_dim,):
        raise nc.DimMismatch(f"question shape {question.shape}, expected ({cfg.text_dim},)")
    store = model.store
    vp, c_v = nc.linear_forward(video, store["video_proj.w"], store["video_proj.b"])
    qp, c_q = nc.linear_forward(question, store["text_proj.w"], store["text_proj.b"])
    attn, c_a = nc.mha_forward(vp, qp[None, :], store, "gate.attn", cfg.n_heads)
    u = vp + attn
    scores = u @ store["gate.w"] + store["gate.b"][0]
    gates = _sigmoid(scores)
    cache = {"c_v": c_v, "c_q": c_q, "c_a": c_a, "u": u, "gates": gates}
    return gates, cache


def gate_backward(model: PcmaModel, dgates: Array, cache: dict) -> tuple[Array, Array]:
    """Backprop through the gate scorer; accumulates parameter gradients."""
    store = model.store
    g = cache["gates"]
    ds = dgates * g * (1.0 - g)
    store.accumulate("gate.w", cache["u"].T @ ds)
    store.accumulate("gate.b", np.array([ds.sum()]))
    du = np.outer(ds, store["gate.w"])
    dvp_attn, dqp = nc.mha_backward(du, cache["c_a"], store)
    dvp = du + dvp_attn
    dvideo, dwv, dbv = nc.linear_backward(dvp, cache["c_v"])
    store.accumulate("video_proj.w", dwv)
    store.accumulate("video_proj.b", dbv)
    dquestion, dwt, dbt = nc.linear_backward(dqp[0], cache["c_q"])
    store.accumulate("text_proj.w", dwt)
    store.accumulate("text_proj.b", dbt)
    return dvideo, dquestion


def split_from_gates(gates: Array, topk_mode: bool = False, k: int | None = None) -> CausalSplit:
    """Threshold at 0.5 (ties causal), or mark exactly the k largest gates.

    Top-k ties resolve to the lowest clip index.
    """
    gates = nc.as_f64(gates)
    n = gates.shape[0]
    if topk_mode:
        if k is None or not 1 <= k <= n:
            raise ValueError(f"top-k mode requires 1 <= k <= {n}")
        order = np.lexsort((np.arange(n), -gates))
        mask = np.zeros(n, dtype=bool)
        mask[order[:k]] = True
    else:
        mask = gates >= 0.5
    return CausalSplit(mask=mask, gates=gates)


def estimate_causal_mask(
    model: PcmaModel,
    instance: VideoQAInstance,
    topk_mode: bool = False,
    k: int | None = None,
) -> CausalSplit:
    gates, _ = gate_forward(
        model, instance.video.astype(np.float64), instance.question.astype(np.float64)
    )
    return split_from_gates(gates, topk_mode=topk_mode, k=k)


# -- mixup -------------------------------------------------------------------


@dataclass(frozen=True)
class MixupResult:
    c_star: Array  # [n_causal, video_dim]
    t_star: Array  # [n_complement, video_dim]
    q_star: Array  # [text_dim]
    a_star: Array  # [text_dim]
    lambda0: float
    lambda1: float
    partner_id: str


def _aligned(rows: Array, n: int) -> Array:
    """Cyclically repeat or truncate partner rows to n rows."""
    if n == 0:
        return rows[:0]
    if rows.shape[0] == 0:
        raise DegenerateSplitError("partner partition is empty but rows are required")
    return rows[np.arange(n) % rows.shape[0]]


def mixup_intervene(
    x: VideoQAInstance,
    x_split: CausalSplit,
    x_prime: VideoQAInstance,
    x_prime_split: CausalSplit,
    cfg: InterventionConfig,
    rng: np.random.Generator,
    lambda0: float | None = None,
    lambda1: float | None = None,
) -> MixupResult:
    """Convex blend of two instances along their causal/complement splits.

    The causal part, question and gold answer share one ratio drawn
    Beta(alpha, alpha); the complement uses an independent uniform ratio.
    lambda0/lambda1 accept forced values for testing endpoints.
    """
    if x.video_dim != x_prime.video_dim or x.text_dim != x_prime.text_dim:
        raise nc.DimMismatch("mixup partners must share feature dims")
    if x_split.causal_indices.size == 0 or x_prime_split.causal_indices.size == 0:
        raise DegenerateSplitError("empty causal set on one side of the mixup")
    lam0 = float(rng.beta(cfg.alpha, cfg.alpha)) if lambda0 is None else float(lambda0)
    lam1 = float(rng.uniform(0.0, 1.0)) if lambda1 is None else float(lambda1)
    if not (0.0 <= lam0 <= 1.0 and 0.0 <= lam1 <= 1.0):
        raise ValueError("mixing ratios must lie in [0, 1]")

    video = x.video.astype(np.float64)
    pvideo = x_prime.video.astype(np.float64)
    c_hat = video[x_split.mask]
    t_hat = video[~x_split.mask]
    c_prime = _aligned(pvideo[x_prime_split.mask], c_hat.shape[0])
    t_prime = _aligned(pvideo[~x_prime_split.mask], t_hat.shape[0])

    q_hat = x.question.astype(np.float64)
    q_prime = x_prime.question.astype(np.float64)
    a_hat = x.answers.astype(np.float64)[x.gold]
    a_prime = x_prime.answers.astype(np.float64)[x_prime.gold]

    return MixupResult(
        c_star=lam0 * c_hat + (1.0 - lam0) * c_prime,
        t_star=lam1 * t_hat + (1.0 - lam1) * t_prime,
        q_star=lam0 * q_hat + (1.0 - lam0) * q_prime,
        a_star=lam0 * a_hat + (1.0 - lam0) * a_prime,
        lambda0=lam0,
        lambda1=lam1,
        partner_id=x_prime.video_id,
    )


def assemble_video(mask: Array, c_star: Array, t_star: Array) -> Array:
    """Interleave mixed causal/complement rows back at the mask's positions."""
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    if c_star.shape[0] + t_star.shape[0] != n:
        raise ValueError(
            f"row counts {c_star.shape[0]}+{t_star.shape[0]} do not cover {n} clips"
        )
    dim = c_star.shape[1] if c_star.size else t_star.shape[1]
    out = np.empty((n, dim))
    out[mask] = c_star
    out[~mask] = t_star
    return out


# -- triplet construction ------------------------------------------------------


class ContrastiveTriplet(NamedTuple):
    anchor: Array
    positive: Array
    negatives: list[Array]


class InfoNceGrads(NamedTuple):
    anchor: Array
    positive: Array
    negatives: list[Array]


def _draw_substitutes(
    rows: Array,
    bank: MemoryBank,
    cfg: InterventionConfig,
    rng: np.random.Generator,
    exclude_video_id: str | None,
) -> Array:
    """One substitute scene per row, per the configured memory source."""
    if len(bank) == 0:
        raise ValueError("memory bank is empty")
    out = np.empty_like(rows)
    if cfg.memory_source is MemorySource.MNSE:
        for i in range(rows.shape[0]):
            q = NeighborQuery(
                vector=rows[i],
                k=cfg.neighbor_k,
                exclude_video_id=exclude_video_id,
                seed=int(rng.integers(2**32)),
            )
            out[i] = bank.sample_neighbor_scene(q).entry.vector
    else:
        entries = [
            e for e in bank.entries()
            if exclude_video_id is None or exclude_video_id not in e.video_id.split("+")
        ]
        if not entries:
            raise ValueError("no eligible bank entries after exclusion")
        for i in range(rows.shape[0]):
            out[i] = entries[int(rng.integers(0, len(entries)))].vector
    return out


def _blend(orig: Array, subs: Array, keep: Array) -> Array:
    """keep*orig + (1-keep)*subs, bit-exact identity when subs == orig."""
    out = keep * orig + (1.0 - keep) * subs
    same = np.all(subs == orig, axis=1)
    out[same] = orig[same]
    return out


def build_triplet_cached(
    backbone: PcmaModel,
    v_star: Array,
    q_star: Array,
    split: CausalSplit,
    bank: MemoryBank,
    q_r: Array,
    cfg: InterventionConfig,
    rng: np.random.Generator,
    exclude_video_id: str | None = None,
    answers: Array | None = None,
) -> tuple[ContrastiveTriplet, dict]:
    """Anchor/positive/negatives with the caches needed for backprop.

    The positive substitutes complement rows; each of the first
    n_negatives-1 negatives substitutes causal rows with fresh draws; the
    final negative pairs the untouched v_star with the random question q_r.
    """
    v_star = nc.as_f64(v_star)
    q_star = nc.as_f64(q_star)
    q_r = nc.as_f64(q_r)
    comp = split.complement_indices
    caus = split.causal_indices

    anchor, anchor_cache = backbone.aggregate_forward(v_star, q_star, answers)

    g_comp = split.gates[comp][:, None]
    subs_pos = (
        _draw_substitutes(v_star[comp], bank, cfg, rng, exclude_video_id)
        if comp.size
        else v_star[:0]
    )
    v_plus = v_star.copy()
    if comp.size:
        v_plus[comp] = _blend(v_star[comp], subs_pos, g_comp)
    positive, positive_cache = backbone.aggregate_forward(v_plus, q_star, answers)

    negatives: list[Array] = []
    negative_caches: list[dict] = []
    neg_subs: list[Array] = []
    g_caus = split.gates[caus][:, None]
    for _ in range(cfg.n_negatives - 1):
        subs_neg = (
            _draw_substitutes(v_star[caus], bank, cfg, rng, exclude_video_id)
            if caus.size
            else v_star[:0]
        )
        v_minus = v_star.copy()
        if caus.size:
            v_minus[caus] = _blend(v_star[caus], subs_neg, 1.0 - g_caus)
        neg, neg_cache = backbone.aggregate_forward(v_minus, q_star, answers)
        negatives.append(neg)
        negative_caches.append(neg_cache)
        neg_subs.append(subs_neg)
    qr_neg, qr_cache = backbone.aggregate_forward(v_star, q_r, answers)
    negatives.append(qr_neg)

    triplet = ContrastiveTriplet(anchor=anchor, positive=positive, negatives=negatives)
    cache = {
        "v_star": v_star,
        "split": split,
        "anchor": anchor_cache,
        "positive": positive_cache,
        "subs_pos": subs_pos,
        "negative_caches": negative_caches,
        "neg_subs": neg_subs,
        "qr": qr_cache,
    }
    return triplet, cache


def build_triplet(
    backbone: PcmaModel,
    v_star: Array,
    q_star: Array,
    split: CausalSplit,
    bank: MemoryBank,
    q_r: Array,
    cfg: InterventionConfig,
    rng: np.random.Generator,
    exclude_video_id: str | None = None,
    answers: Array | None = None,
) -> ContrastiveTriplet:
    triplet, _ = build_triplet_cached(
        backbone, v_star, q_star, split, bank, q_r, cfg, rng, exclude_video_id, answers
    )
    return triplet


def triplet_backward(backbone: PcmaModel, grads: InfoNceGrads, cache: dict) -> Array:
    """Backprop the triplet; returns gate gradients [n_clips].

    Backbone parameter gradients accumulate on the store. Gradients into
    the mixed video and questions stop there (they are data), except for
    the substitution blends, whose gate dependence is returned.
    """
    split: CausalSplit = cache["split"]
    v_star = cache["v_star"]
    comp = split.complement_indices
    caus = split.causal_indices
    dgates = np.zeros(split.n_clips)

    backbone.aggregate_backward(grads.anchor, cache["anchor"])

    pos_in = backbone.aggregate_backward(grads.positive, cache["positive"])
    if comp.size:
        dv = pos_in.video[comp]
        dgates[comp] += np.sum(dv * (v_star[comp] - cache["subs_pos"]), axis=1)

    for dneg, neg_cache, subs in zip(
        grads.negatives[:-1], cache["negative_caches"], cache["neg_subs"]
    ):
        neg_in = backbone.aggregate_backward(dneg, neg_cache)
        if caus.size:
            dv = neg_in.video[caus]
            dgates[caus] += np.sum(dv * (subs - v_star[caus]), axis=1)

    backbone.aggregate_backward(grads.negatives[-1], cache["qr"])
    return dgates


# -- losses --------------------------------------------------------------------


def infonce_loss(t: ContrastiveTriplet) -> tuple[float, InfoNceGrads]:
    """-log( exp(a.a+) / (exp(a.a+) + sum_n exp(a.a-_n)) ), raw dot products.

    Stable via max-subtraction; returns gradients for anchor, positive and
    every negative.
    """
    if len(t.negatives) < 1:
        raise ValueError("triplet needs at least one negative")
    a = nc.as_f64(t.anchor)
    sims = np.empty(1 + len(t.negatives))
    sims[0] = a @ nc.as_f64(t.positive)
    for i, neg in enumerate(t.negatives):
        sims[1 + i] = a @ nc.as_f64(neg)
    nc.require_finite("similarities", sims)
    m = float(sims.max())
    e = np.exp(sims - m)
    z = float(e.sum())
    loss = m + np.log(z) - sims[0]
    p = e / z
    danchor = (p[0] - 1.0) * nc.as_f64(t.positive)
    dnegatives = []
    for i, neg in enumerate(t.negatives):
        danchor += p[1 + i] * nc.as_f64(neg)
        dnegatives.append(p[1 + i] * a)
    dpositive = (p[0] - 1.0) * a
    return float(loss), InfoNceGrads(anchor=danchor, positive=dpositive, negatives=dnegatives)


def total_loss(erm: float, cl: float, cfg: InterventionConfig) -> float:
    """Answering loss plus beta_cl times the contrastive loss."""
    if not (np.isfinite(erm) and np.isfinite(cl)):
        raise nc.NumericsError("loss components must be finite")
    return float(erm + cfg.beta_cl * cl)
