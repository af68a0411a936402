"""Variational losses, a tabular learner for the two heads, and the KL check.

The variable-length loss integrates, over t and interpolant draws, a
cross-entropy term for the unmasking head weighted by betadot/(1-beta) and a
scalar Bregman term phi(a, g) = g - a log g for the insertion head weighted
by alphadot/(1-alpha). Its unique minimizer over measurable heads is the
exact posterior pair, and the loss gap to the minimizer upper-bounds the KL
divergence between the target and the sampled terminal law. The fixed-length
loss keeps only the cross-entropy term with weight alphadot/(1-alpha).

The tabular model discretizes time into buckets and stores one logit vector
per (state, bucket, position) and one unconstrained scalar per (state,
bucket, gap) mapped through g = g_floor + exp(raw). Untouched entries read
as the uniform distribution and g = 1 + g_floor; at or beyond the model's
length cap the insertion head is pinned to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .interpolant import sample_flex, sample_mdm
from .rand import make_rng
from .schedule import T_MAX, Schedule, SchedulePair
from .sequence import mask_positions
from .target import TargetDistribution

G_FLOOR = 1e-6


def bregman_phi(a: float, g: float) -> float:
    """The scalar Bregman divergence g - a*log(g); minimized over g at g=a."""
    if g <= 0.0:
        raise ValueError("g must be positive")
    if a < 0.0:
        raise ValueError("a must be nonnegative")
    return g - a * math.log(g)


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters for the tabular learner.

    Updates are per-coordinate adaptive (Adagrad scaling of the summed
    per-sample gradients): a tabular model mixes entries visited every
    batch with entries visited a handful of times over the whole run, and
    a single global step size cannot serve both.
    """

    learning_rate: float = 0.5
    steps: int = 20_000
    batch_size: int = 64
    time_mode: str = "low_discrepancy"
    seed: int = 0
    n_buckets: int = 32
    time_cutoff: float = 0.995

    def __post_init__(self):
        if self.learning_rate <= 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("hyperparameters must be positive")
        if self.time_mode not in ("uniform", "low_discrepancy"):
            raise ValueError(f"unknown time mode {self.time_mode!r}")
        if self.n_buckets < 1:
            raise ValueError("n_buckets must be >= 1")
        if not 0.0 < self.time_cutoff <= T_MAX:
            raise ValueError("time_cutoff must lie in (0, T_MAX]")


class TabularModel:
    """Lookup-table heads over (state, time bucket, position-or-gap).

    f rows are stored as logits and normalized on read; g values are stored
    unconstrained and mapped through g_floor + exp(raw), so both heads stay
    in their domains under unprojected SGD. Implements the head protocol the
    samplers and losses use (pair, init_state, unmask_dist, gap_mean).

    When max_len is set the hypothesis class is finite-support: gap_mean is
    identically zero at or beyond that length. Interpolant states never
    outgrow the longest target sequence, so those cells see gap statistic 0
    in training anyway; pinning them keeps an unseen-state default (exp(0))
    from feeding its own insertions during sampling.
    """

    def __init__(
        self,
        vocab_size: int,
        pair: SchedulePair,
        prefix: tuple = (),
        n_buckets: int = 32,
        g_floor: float = G_FLOOR,
        max_len: int | None = None,
    ):
        if vocab_size < 1 or n_buckets < 1 or g_floor <= 0:
            raise ValueError("invalid model shape")
        if max_len is not None and max_len < len(prefix):
            raise ValueError("max_len shorter than the clamped prefix")
        self.vocab_size = vocab_size
        self.pair = pair
        self.prefix = tuple(prefix)
        self.n_buckets = n_buckets
        self.g_floor = g_floor
        self.max_len = max_len
        self.f_logits: dict = {}
        self.g_raw: dict = {}
        self.training_curve: list = []

    def bucket(self, t: float) -> int:
        return min(int(t * self.n_buckets), self.n_buckets - 1)

    def bucket_midpoint(self, b: int) -> float:
        return (b + 0.5) / self.n_buckets

    def init_state(self) -> tuple:
        return self.prefix

    def _logits(self, key) -> np.ndarray:
        row = self.f_logits.get(key)
        if row is None:
            row = np.zeros(self.vocab_size)
            self.f_logits[key] = row
        return row

    def _raw(self, key) -> float:
        return self.g_raw.get(key, 0.0)

    def unmask_dist(self, t: float, x: tuple, i: int) -> np.ndarray:
        row = self.f_logits.get((x, self.bucket(t), i))
        if row is None:
            return np.full(self.vocab_size, 1.0 / self.vocab_size)
        return _softmax(row)

    def gap_mean(self, t: float, x: tuple, i: int) -> float:
        if self.max_len is not None and len(x) >= self.max_len:
            return 0.0
        return self.g_floor + math.exp(self._raw((x, self.bucket(t), i)))

    def to_doc(self) -> dict:
        """Portable key-value form (JSON-serializable)."""
        enc = lambda key: "|".join(
            [",".join(map(str, key[0])), str(key[1]), str(key[2])]
        )
        return {
            "vocab_size": self.vocab_size,
            "n_buckets": self.n_buckets,
            "g_floor": self.g_floor,
            "max_len": self.max_len,
            "prefix": list(self.prefix),
            "f_logits": {enc(k): [float(u) for u in v] for k, v in self.f_logits.items()},
            "g_raw": {enc(k): float(v) for k, v in self.g_raw.items()},
        }

    @staticmethod
    def from_doc(doc: dict, pair: SchedulePair) -> "TabularModel":
        cap = doc.get("max_len")
        model = TabularModel(
            int(doc["vocab_size"]),
            pair,
            tuple(doc.get("prefix", ())),
            int(doc["n_buckets"]),
            float(doc["g_floor"]),
            None if cap is None else int(cap),
        )
        dec = lambda s: (
            tuple(int(u) for u in s.split("|")[0].split(",") if u != ""),
            int(s.split("|")[1]),
            int(s.split("|")[2]),
        )
        for k, v in doc.get("f_logits", {}).items():
            model.f_logits[dec(k)] = np.asarray(v, dtype=float)
        for k, v in doc.get("g_raw", {}).items():
            model.g_raw[dec(k)] = float(v)
        return model


def _softmax(row: np.ndarray) -> np.ndarray:
    z = np.exp(row - row.max())
    return z / z.sum()


def _draw_times(n: int, rng, mode: str, t_hi: float) -> np.ndarray:
    """n time points on [0, t_hi]; low-discrepancy stratifies one per cell."""
    if mode == "uniform":
        return rng.random(n) * t_hi
    return (np.arange(n) + rng.random(n)) / n * t_hi


def flex_loss_samples(
    source,
    target: TargetDistribution,
    pair: SchedulePair,
    n_mc: int,
    rng,
    time_mode: str = "uniform",
    t_hi: float = T_MAX,
    parts: bool = False,
) -> np.ndarray:
    """Per-draw values of the variable-length loss integrand.

    Each draw is (t, x1, (x_t, s_t)); the value is the weighted cross-entropy
    of the masked positions plus the weighted Bregman terms of the
    non-clamped gaps. Sharing the rng seed across sources pairs the draws,
    which is how loss differences are estimated with low variance. With
    parts=True the (unmasking, insertion) terms come back as an (n_mc, 2)
    array instead of their sum.
    """
    alpha, beta = pair.insertion, pair.unmasking
    k0 = target.clamp_prefix_len
    times = _draw_times(n_mc, rng, time_mode, t_hi)
    out = np.empty((n_mc, 2))
    for j in range(n_mc):
        t = float(times[j])
        av, ad = alpha.eval(t)
        bv, bd = beta.eval(t)
        w_unmask = bd / (1.0 - bv)
        w_insert = ad / (1.0 - av)
        x1 = target.sample(rng)
        js = sample_flex(x1, t, pair, rng, k0)
        xt, st = js.xt, js.st.indices
        ce = 0.0
        for i in mask_positions(xt):
            p = float(source.unmask_dist(t, xt, i)[x1[st[i]]])
            ce -= w_unmask * math.log(max(p, 1e-300))
        gaps = js.gap_sizes()
        ins = 0.0
        for i in range(k0, len(xt) + 1):
            g = max(float(source.gap_mean(t, xt, i)), G_FLOOR)
            ins += w_insert * bregman_phi(float(gaps[i]), g)
        out[j] = (ce, ins)
    return out if parts else out.sum(axis=1)


def flex_loss(
    source,
    target: TargetDistribution,
    pair: SchedulePair,
    n_mc: int,
    rng,
    time_mode: str = "uniform",
    t_hi: float = T_MAX,
) -> float:
    """Monte Carlo estimate of the variable-length variational loss."""
    return float(
        flex_loss_samples(source, target, pair, n_mc, rng, time_mode, t_hi).mean()
    )


def mdm_loss_samples(
    source,
    target: TargetDistribution,
    sch: Schedule,
    n_mc: int,
    rng,
    time_mode: str = "uniform",
    t_hi: float = T_MAX,
) -> np.ndarray:
    """Per-draw values of the fixed-length loss integrand (unmask term only)."""
    k0 = target.clamp_prefix_len
    times = _draw_times(n_mc, rng, time_mode, t_hi)
    out = np.empty(n_mc)
    for j in range(n_mc):
        t = float(times[j])
        av, ad = sch.eval(t)
        w = ad / (1.0 - av)
        x1 = target.sample(rng)
        xt = sample_mdm(x1, t, sch, rng, k0)
        val = 0.0
        for i in mask_positions(xt):
            p = float(source.unmask_dist(t, xt, i)[x1[i]])
            val -= w * math.log(max(p, 1e-300))
        out[j] = val
    return out


def mdm_loss(
    source,
    target: TargetDistribution,
    sch: Schedule,
    n_mc: int,
    rng,
    time_mode: str = "uniform",
    t_hi: float = T_MAX,
) -> float:
    return float(
        mdm_loss_samples(source, target, sch, n_mc, rng, time_mode, t_hi).mean()
    )


# Training.


def draw_training_batch(
    target: TargetDistribution, pair: SchedulePair, n: int, rng, cfg: TrainConfig
) -> list:
    """n tuples (t, x1, joint draw) for gradient evaluation."""
    times = _draw_times(n, rng, cfg.time_mode, cfg.time_cutoff)
    k0 = target.clamp_prefix_len
    batch = []
    for j in range(n):
        t = float(times[j])
        x1 = target.sample(rng)
        batch.append((t, x1, sample_flex(x1, t, pair, rng, k0)))
    return batch


def batch_loss_and_grads(model: TabularModel, pair: SchedulePair, batch, clamp: int):
    """Mean loss over the batch plus analytic gradients per touched entry.

    Cross-entropy through the softmax gives d/dlogits = w * (softmax -
    onehot); the Bregman term gives d/dg = w * (1 - a/g). Gradients are
    averaged over the batch, matching the finite difference of the mean
    loss; g-gradients are reported in g-space (the trainer chain-rules
    them through its own parametrization).
    """
    alpha, beta = pair.insertion, pair.unmasking
    grad_f: dict = {}
    grad_g: dict = {}
    total = 0.0
    inv = 1.0 / len(batch)
    for t, x1, js in batch:
        av, ad = alpha.eval(t)
        bv, bd = beta.eval(t)
        w_unmask = bd / (1.0 - bv)
        w_insert = ad / (1.0 - av)
        xt, st = js.xt, js.st.indices
        b = model.bucket(t)
        for i in mask_positions(xt):
            key = (xt, b, i)
            probs = _softmax(model._logits(key))
            v_true = x1[st[i]]
            total -= w_unmask * math.log(max(float(probs[v_true]), 1e-300))
            g = grad_f.get(key)
            if g is None:
                g = np.zeros(model.vocab_size)
                grad_f[key] = g
            g += (w_unmask * inv) * probs
            g[v_true] -= w_unmask * inv
        gaps = js.gap_sizes()
        capped = model.max_len is not None and len(xt) >= model.max_len
        for i in range(clamp, len(xt) + 1):
            key = (xt, b, i)
            gval = max(float(model.gap_mean(t, xt, i)), model.g_floor)
            a = float(gaps[i])
            total += w_insert * bregman_phi(a, gval)
            if capped:
                continue
            grad_g[key] = grad_g.get(key, 0.0) + (w_insert * inv) * (1.0 - a / gval)
    return total * inv, grad_f, grad_g


def train_tabular(
    target: TargetDistribution, pair: SchedulePair, cfg: TrainConfig
) -> TabularModel:
    """Adaptive SGD on the variable-length loss; returns the fitted model.

    Per-sample gradients are summed over the batch and applied with
    Adagrad's per-coordinate scaling. The g head chains d/dg through
    g = g_floor + exp(raw), keeping g positive without projection. The
    per-step batch loss trace is kept on model.training_curve as (step,
    loss) pairs.
    """
    rng = make_rng(cfg.seed)
    model = TabularModel(
        target.vocab_size, pair, target.prefix, cfg.n_buckets,
        max_len=target.max_len,
    )
    k0 = target.clamp_prefix_len
    acc_f: dict = {}
    acc_g: dict = {}
    avg_f: dict = {}  # key -> [value-time integral, last update step]
    avg_g: dict = {}
    avg_start = cfg.steps // 2
    lr = cfg.learning_rate
    B = cfg.batch_size
    for step in range(cfg.steps):
        batch = draw_training_batch(target, pair, cfg.batch_size, rng, cfg)
        loss, grad_f, grad_g = batch_loss_and_grads(model, pair, batch, k0)
        for key, g in grad_f.items():
            summed = B * g
            acc = acc_f.get(key)
            if acc is None:
                acc = np.full(model.vocab_size, 1e-12)
                acc_f[key] = acc
            acc += summed * summed
            old = model.f_logits[key]
            if step >= avg_start:
                rec = avg_f.get(key)
                if rec is None:
                    rec = [old * (step - avg_start), step]
                    avg_f[key] = rec
                else:
                    rec[0] += old * (step - rec[1])
                    rec[1] = step
            model.f_logits[key] = old - lr * summed / np.sqrt(acc)
        for key, g in grad_g.items():
            gval = model.g_floor + math.exp(model._raw(key))
            summed = B * g * (gval - model.g_floor)
            acc = acc_g.get(key, 1e-12) + summed * summed
            acc_g[key] = acc
            old = model._raw(key)
            if step >= avg_start:
                rec = avg_g.get(key)
                if rec is None:
                    rec = [old * (step - avg_start), step]
                    avg_g[key] = rec
                else:
                    rec[0] += old * (step - rec[1])
                    rec[1] = step
            model.g_raw[key] = old - lr * summed / math.sqrt(acc)
        model.training_curve.append((step, loss))
    # tail (Polyak) averaging over the final half damps SGD jitter;
    # entries untouched in the tail keep their standing value
    span = cfg.steps - avg_start
    if span > 0:
        for key, (integral, last) in avg_f.items():
            model.f_logits[key] = (
                integral + model.f_logits[key] * (cfg.steps - last)
            ) / span
        for key, (integral, last) in avg_g.items():
            model.g_raw[key] = (
                integral + model.g_raw[key] * (cfg.steps - last)
            ) / span
    return model


def train_loss_gap_sigma(
    trained,
    oracle,
    target: TargetDistribution,
    pair: SchedulePair,
    n_mc: int,
    seed,
) -> tuple:
    """Paired estimate (gap, sigma) of flex_loss(trained) - flex_loss(oracle)."""
    a = flex_loss_samples(trained, target, pair, n_mc, make_rng(seed))
    b = flex_loss_samples(oracle, target, pair, n_mc, make_rng(seed))
    d = a - b
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(n_mc))


@dataclass(frozen=True)
class KlGapResult:
    kl_estimate: float
    loss_gap: float
    sigma_kl: float
    sigma_gap: float
    margin: float
    out_of_support: int
    ok: bool


def kl_gap_check(
    trained,
    oracle,
    target: TargetDistribution,
    pair: SchedulePair,
    N: int,
    n_samples: int,
    rng,
    n_mc: int = 40_000,
    loss_seed: int = 977,
) -> KlGapResult:
    """Verify KL(p1 || sampled law of the trained heads) <= loss gap + margin.

    The terminal law is estimated from n_samples trajectories with add-eps
    smoothing (eps = 1/(10 n_samples)) so unseen atoms stay finite; runs that
    leave the support are counted in the denominator, charging their mass
    against the model. The margin is 3 * (sigma_kl + sigma_gap) with
    sigma_kl from the delta method and sigma_gap from paired draws.
    """
    from .ctmc import AdaptiveConfig, sample_many

    cfg = AdaptiveConfig(strategy="vanilla", steps=N)
    seed = int(rng.integers(1 << 31))
    samples = sample_many(trained, cfg, n_samples, seed)
    eps = 1.0 / (10.0 * n_samples)
    counts: dict = {}
    out_of_support = 0
    for s in samples:
        counts[s] = counts.get(s, 0) + 1
        if target.prob(s) == 0.0:
            out_of_support += 1
    denom = n_samples + eps * len(target.support)
    kl = 0.0
    chi = 0.0
    for atom, p in target.atoms:
        q = (counts.get(atom, 0) + eps) / denom
        kl += p * math.log(p / q)
        chi += p * p / q
    sigma_kl = math.sqrt(max(chi - 1.0, 0.0) / n_samples)
    gap, sigma_gap = train_loss_gap_sigma(
        trained, oracle, target, pair, n_mc, loss_seed
    )
    margin = 3.0 * (sigma_kl + sigma_gap)
    return KlGapResult(
        kl_estimate=kl,
        loss_gap=gap,
        sigma_kl=sigma_kl,
        sigma_gap=sigma_gap,
        margin=margin,
        out_of_support=out_of_support,
        ok=kl <= gap + margin,
    )
