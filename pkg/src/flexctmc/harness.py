"""Statistical verification: sampler metrics, maze scoring, acceptance suite.

Every guarantee of the framework is checked here as a pass/fail criterion
with explicit tolerances: forward-equation exactness of the oracle rates,
the gap-count/embedding-count identity, terminal-law correctness of vanilla
and any-order inference, schedule-independence of the posterior, minimizer
and KL-bound properties of the variational losses, length fidelity against
a padded fixed-length baseline, the maze benchmark, and analytic gradients.
Statistical assertions use a 4-sigma multinomial margin and each stochastic
criterion retries once with a fresh seed before failing.
"""

from __future__ import annotations

import math
import time
import warnings
from collections import Counter
from dataclasses import dataclass
from itertools import combinations, product

import numpy as np

from .ctmc import (
    AdaptiveConfig,
    enumerate_flex_states,
    kfe_residual,
    sample_many,
    _flex_state_marginal,
)
from .loss_learn import (
    TrainConfig,
    batch_loss_and_grads,
    draw_training_batch,
    flex_loss,
    kl_gap_check,
    train_tabular,
)
from .oracle import MdmOracle, OracleContext, perturbed_oracle
from .rand import make_rng
from .schedule import Schedule, SchedulePair
from .sequence import (
    MASK,
    gap_count,
    embed_count,
    insert_at,
    mask_positions,
)
from .target import (
    TargetDistribution,
    bundled_targets,
    condition_on_prefix,
    length_marginal,
    maze_generate,
    maze_prompts,
    maze_target,
    mdm_pad_target,
    strip_pad,
)


def empirical_tv(samples, target: TargetDistribution) -> float:
    """Total variation between the empirical PMF of samples and the target."""
    if not samples:
        raise ValueError("samples must be nonempty")
    n = len(samples)
    counts = Counter(samples)
    keys = set(counts) | set(target.support)
    return 0.5 * sum(abs(counts.get(k, 0) / n - target.prob(k)) for k in keys)


def length_tv(samples, target: TargetDistribution) -> float:
    """Total variation between empirical and exact length marginals."""
    if not samples:
        raise ValueError("samples must be nonempty")
    n = len(samples)
    counts = Counter(len(s) for s in samples)
    exact = length_marginal(target)
    keys = set(counts) | set(exact)
    return 0.5 * sum(abs(counts.get(k, 0) / n - exact.get(k, 0.0)) for k in keys)


def tv_margin(support_size: int, n_samples: int) -> float:
    """4-sigma multinomial bound on the TV of an exact-sampler empirical PMF."""
    return 4.0 * math.sqrt(support_size / n_samples)


def maze_success(outputs, grid, prompts) -> float:
    """Fraction of outputs that decode to a valid in-order planning path.

    An output must reproduce its prompt (subgoal ids then the separator),
    then walk open cells one 4-neighbor step at a time, starting at the
    first subgoal, ending at the last, and passing through all of them in
    order. Anything undecodable counts as failure.
    """
    if len(outputs) != len(prompts):
        raise ValueError("one output per prompt required")
    sep = grid.height * grid.width
    ok = 0
    for out, prompt in zip(outputs, prompts):
        if MASK in out or out[: len(prompt)] != tuple(prompt):
            continue
        path_ids = out[len(prompt) :]
        if not path_ids or any(not 0 <= c < sep for c in path_ids):
            continue
        cells = [grid.cell_rc(c) for c in path_ids]
        if any(not grid.is_open(r, c) for r, c in cells):
            continue
        if any(
            abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1
            for a, b in zip(cells, cells[1:])
        ):
            continue
        subgoals = [grid.cell_rc(c) for c in prompt[:-1]]
        if cells[0] != subgoals[0] or cells[-1] != subgoals[-1]:
            continue
        k = 0
        for cell in cells:
            if k < len(subgoals) and cell == subgoals[k]:
                k += 1
        if k == len(subgoals):
            ok += 1
    return ok / len(outputs)


@dataclass
class CriterionResult:
    name: str
    passed: bool
    detail: str
    seconds: float
    retried: bool = False

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        retry = " (after retry)" if self.retried else ""
        return f"[{status}] {self.name}: {self.detail}{retry} [{self.seconds:.1f}s]"


def _with_retry(fn, seed: int, retry_seed: int) -> tuple:
    """Run a seeded check, retrying once with a fresh seed on failure."""
    t0 = time.time()
    passed, detail = fn(seed)
    if passed:
        return passed, detail, time.time() - t0, False
    passed, detail = fn(retry_seed)
    return passed, detail, time.time() - t0, True


# Individual criteria. Each returns (passed, detail) given a seed.


def check_kfe(seed: int = 0) -> tuple:
    """Max forward-equation residual over 20 interior times, both families.

    h = 2e-5 keeps the central-difference truncation error (which grows
    like 1/(1-t)^2 as the insertion intensity diverges) below the 1e-6
    tolerance at the latest probed time.
    """
    del seed  # deterministic
    pair = SchedulePair.all_linear()
    times = [(j + 0.5) / 20 for j in range(20)]
    worst = 0.0
    for name, tgt in bundled_targets().items():
        ctx = OracleContext(tgt, pair)
        for t in times:
            worst = max(worst, kfe_residual(ctx, t, h=2e-5, family="flex"))
        padded, _ = mdm_pad_target(tgt)
        pctx = OracleContext(padded, pair)
        for t in times:
            worst = max(worst, kfe_residual(pctx, t, h=2e-5, family="mdm"))
    return worst <= 1e-6, f"max residual {worst:.3e} (tolerance 1e-6)"


def check_gap_identity(seed: int = 0) -> tuple:
    """gap_count(x,i,y) == embed_count(insert_at(x,i,MASK), y) exhaustively."""
    del seed
    checked = 0
    for n in range(7):
        for y in product(range(2), repeat=n):
            for m in range(n + 1):
                for s in combinations(range(n), m):
                    base = [y[j] for j in s]
                    for pat in range(1 << m):
                        x = tuple(
                            MASK if pat >> k & 1 else base[k] for k in range(m)
                        )
                        for i in range(len(x) + 1):
                            lhs = gap_count(x, i, y)
                            rhs = embed_count(insert_at(x, i, MASK), y)
                            if lhs != rhs:
                                return False, (
                                    f"mismatch at x={x} i={i} y={y}: "
                                    f"{lhs} != {rhs}"
                                )
                            checked += 1
    return True, f"{checked} (x, i, y) triples, exact equality"


def check_vanilla(seed: int = 11) -> tuple:
    """Terminal-law TV at N=512 on every bundled target, plus N-refinement."""
    pair = SchedulePair.all_linear()
    details = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name, tgt in bundled_targets().items():
            ctx = OracleContext(tgt, pair)
            cfg = AdaptiveConfig(strategy="vanilla", steps=512)
            out = sample_many(ctx, cfg, 20_000, seed=seed)
            tv = empirical_tv(out, tgt)
            details.append(f"{name} TV={tv:.4f}")
            if tv > 0.03:
                return False, f"{name} TV {tv:.4f} > 0.03"
        # refinement: coarse grid strictly worse on the mixed-length target
        tgt = bundled_targets()["mixed_len"]
        ctx = OracleContext(tgt, pair)
        coarse_avg, fine_avg = 0.0, 0.0
        for j in range(5):
            out8 = sample_many(
                ctx, AdaptiveConfig(strategy="vanilla", steps=8), 4000, seed=seed + 100 + j
            )
            out512 = sample_many(
                ctx, AdaptiveConfig(strategy="vanilla", steps=512), 4000, seed=seed + 200 + j
            )
            coarse_avg += empirical_tv(out8, tgt) / 5
            fine_avg += empirical_tv(out512, tgt) / 5
    if fine_avg >= coarse_avg:
        return False, f"N=512 TV {fine_avg:.4f} not below N=8 TV {coarse_avg:.4f}"
    details.append(f"refinement N=8 {coarse_avg:.4f} -> N=512 {fine_avg:.4f}")
    return True, "; ".join(details)


def check_adaptive(seed: int = 13) -> tuple:
    """All four any-order strategies recover the target law at N=512."""
    pair = SchedulePair.all_linear()
    tgt = bundled_targets()["mixed_len"]
    ctx = OracleContext(tgt, pair)
    details = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for j, strat in enumerate(
            ("leftmost", "random_order", "topk_confidence", "topk_sliding_window")
        ):
            cfg = AdaptiveConfig(strategy=strat, steps=512)
            out = sample_many(ctx, cfg, 20_000, seed=seed + j)
            tv = empirical_tv(out, tgt)
            details.append(f"{strat} TV={tv:.4f}")
            if tv > 0.03:
                return False, f"{strat} TV {tv:.4f} > 0.03"
    return True, "; ".join(details)


def check_beta_independence(seed: int = 17) -> tuple:
    """Posterior identical under two unmasking schedules; same terminal law."""
    lin = SchedulePair.all_linear()
    sq = SchedulePair(Schedule.linear(), Schedule.polynomial(2.0))
    tgt = bundled_targets()["mixed_len"]
    c1, c2 = OracleContext(tgt, lin), OracleContext(tgt, sq)
    states = [s for s in enumerate_flex_states(tgt) if mask_positions(s)]
    for x in states:
        for t in (0.2, 0.5, 0.8):
            for i in mask_positions(x):
                a = c1.unmask_marginal(t, x, i)
                b = c2.unmask_marginal(t, x, i)
                if not np.array_equal(a, b):
                    return False, f"posterior differs at x={x} i={i} t={t}"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cfg = AdaptiveConfig(strategy="vanilla", steps=512)
        tv1 = empirical_tv(sample_many(c1, cfg, 20_000, seed=seed), tgt)
        tv2 = empirical_tv(sample_many(c2, cfg, 20_000, seed=seed + 1), tgt)
    if tv1 > 0.03 or tv2 > 0.03:
        return False, f"terminal TV beta=t {tv1:.4f}, beta=t^2 {tv2:.4f} (> 0.03)"
    return True, (
        f"posterior exact match on {len(states)} masked states; "
        f"terminal TV {tv1:.4f} / {tv2:.4f}"
    )


def check_minimizer(seed: int = 19) -> tuple:
    """Trained heads near the oracle; oracle loss below perturbed, 5/5 seeds."""
    pair = SchedulePair.all_linear()
    tgt = bundled_targets()["two_atom"]
    ctx = OracleContext(tgt, pair)
    cfg = TrainConfig(seed=seed, batch_size=2048)
    model = train_tabular(tgt, pair, cfg)
    worst_f, worst_g = trained_vs_oracle(model, ctx, tgt, pair)
    if worst_f > 0.05 or worst_g > 0.05:
        return False, f"trained heads off oracle: f TV {worst_f:.4f}, g {worst_g:.4f}"
    wins = 0
    for j in range(5):
        rng_seed = seed + 500 + j
        lo = flex_loss(ctx, tgt, pair, 20_000, make_rng(rng_seed))
        lp = flex_loss(perturbed_oracle(ctx), tgt, pair, 20_000, make_rng(rng_seed))
        wins += lo < lp
    if wins != 5:
        return False, f"oracle beat the perturbed oracle only {wins}/5 times"
    return True, (
        f"trained f TV {worst_f:.4f}, g {worst_g:.4f} (<= 0.05); "
        f"oracle < perturbed 5/5"
    )


def trained_vs_oracle(model, ctx, target, pair) -> tuple:
    """Worst-case head error on states with visit probability >= 1e-3."""
    worst_f, worst_g = 0.0, 0.0
    for x in enumerate_flex_states(target):
        for b in range(model.n_buckets):
            tm = model.bucket_midpoint(b)
            if _flex_state_marginal(target, pair, tm, x) < 1e-3:
                continue
            for i in mask_positions(x):
                d = model.unmask_dist(tm, x, i) - ctx.unmask_marginal(tm, x, i)
                worst_f = max(worst_f, 0.5 * float(np.abs(d).sum()))
            for gpos in range(len(x) + 1):
                worst_g = max(
                    worst_g,
                    abs(model.gap_mean(tm, x, gpos) - ctx.insertion_expectation(tm, x, gpos)),
                )
    return worst_f, worst_g


def check_kl_bound(seed: int = 23) -> tuple:
    """KL(target || sampled law) <= loss gap + 3-sigma, model and perturbed."""
    pair = SchedulePair.all_linear()
    tgt = bundled_targets()["two_atom"]
    ctx = OracleContext(tgt, pair)
    model = train_tabular(tgt, pair, TrainConfig(seed=seed, steps=4000))
    details = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for label, src in (("trained", model), ("perturbed", perturbed_oracle(ctx))):
            res = kl_gap_check(
                src, ctx, tgt, pair, N=512, n_samples=20_000, rng=make_rng(seed)
            )
            details.append(
                f"{label}: KL {res.kl_estimate:.4f} <= gap {res.loss_gap:.4f} "
                f"+ {res.margin:.4f}"
            )
            if not res.ok:
                return False, details[-1] + " VIOLATED"
    return True, "; ".join(details)


def check_length_fidelity(seed: int = 29) -> tuple:
    """Length marginal at N=512; padded fixed-length baseline compared at N=8.

    The comparison clause asks the variable-length sampler to beat the padded
    baseline on length TV at a matched coarse grid.  With exact oracles the
    padded chain's per-position pad marginals are exact, so its length error
    is second order in the step size, while Poisson insertion counts carry a
    first-order overdispersion; the measured direction is reported as-is.
    """
    pair = SchedulePair.all_linear()
    tgt = bundled_targets()["mixed_len"]
    ctx = OracleContext(tgt, pair)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = sample_many(ctx, AdaptiveConfig(strategy="vanilla", steps=512), 20_000, seed=seed)
        ltv = length_tv(out, tgt)
        padded, pad_id = mdm_pad_target(tgt)
        mdm = MdmOracle(padded, pair.insertion)
        flex_wins = 0
        pairs = []
        for j in range(5):
            cfg = AdaptiveConfig(strategy="vanilla", steps=8)
            fx = sample_many(ctx, cfg, 4000, seed=seed + 10 + j)
            md = sample_many(mdm, cfg, 4000, seed=seed + 20 + j)
            md_lens = [len(strip_pad(s, pad_id)) for s in md]
            flex_ltv = _length_tv_from_lens([len(s) for s in fx], tgt)
            mdm_ltv = _length_tv_from_lens(md_lens, tgt)
            pairs.append(f"{flex_ltv:.3f}/{mdm_ltv:.3f}")
            flex_wins += flex_ltv < mdm_ltv
    detail = (
        f"length TV {ltv:.4f} at N=512 (bar 0.02); "
        f"N=8 wins over padded baseline {flex_wins}/5 (need 3), "
        f"per-seed TV ours/baseline: {', '.join(pairs)}"
    )
    return ltv <= 0.02 and flex_wins >= 3, detail


def _length_tv_from_lens(lens, target: TargetDistribution) -> float:
    n = len(lens)
    counts = Counter(lens)
    exact = length_marginal(target)
    keys = set(counts) | set(exact)
    return 0.5 * sum(abs(counts.get(k, 0) / n - exact.get(k, 0.0)) for k in keys)


def check_maze(seed: int = 31) -> tuple:
    """Success rate on 5x5 mazes with 2 and 3 subgoals, plus structure checks."""
    pair = SchedulePair.all_linear()
    for gseed in range(20):
        grid = maze_generate(5, 5, seed=seed + gseed)
        err = _maze_structure_error(grid)
        if err:
            return False, f"structure violation at seed {seed + gseed}: {err}"
    n_prompts_goal = 500
    cfg = AdaptiveConfig(strategy="vanilla", steps=256)
    succ_n = succ_ok = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        done = False
        for round_idx in range(100):
            if done:
                break
            grid = maze_generate(5, 5, seed=seed + 100 + round_idx, extra_door_frac=0.15)
            for K in (2, 3):
                tgt = maze_target(
                    grid, K=K, n_pairs=20, max_paths_per_pair=8,
                    seed=seed + 200 + round_idx * 2 + K,
                )
                prompts = maze_prompts(tgt)
                outs = []
                rng = make_rng(seed + 300 + round_idx * 2 + K)
                for prompt in prompts:
                    cond = condition_on_prefix(tgt, prompt)
                    ctx = OracleContext(cond, pair)
                    outs.append(sample_many(ctx, cfg, 1, seed=int(rng.integers(1 << 31)))[0])
                rate = maze_success(outs, grid, prompts)
                succ_ok += round(rate * len(prompts))
                succ_n += len(prompts)
                if succ_n >= n_prompts_goal:
                    done = True
                    break
    rate = succ_ok / succ_n
    if rate < 0.98:
        return False, f"success {succ_ok}/{succ_n} = {rate:.4f} < 0.98"
    return True, f"success {succ_ok}/{succ_n} = {rate:.4f}; structure OK for 20 seeds"


def _maze_structure_error(grid) -> str:
    """Perfect-maze invariants: odd rooms open, borders closed, tree topology."""
    H, W = grid.height, grid.width
    for c in range(W):
        if grid.is_open(0, c) or grid.is_open(H - 1, c):
            return "open border cell"
    for r in range(H):
        if grid.is_open(r, 0) or grid.is_open(r, W - 1):
            return "open border cell"
    rooms = [(r, c) for r in range(1, H, 2) for c in range(1, W, 2)]
    if any(not grid.is_open(r, c) for r, c in rooms):
        return "closed room cell"
    # count passages between adjacent rooms; a perfect maze is a tree
    edges = 0
    for r, c in rooms:
        if c + 2 < W and grid.is_open(r, c + 1):
            edges += 1
        if r + 2 < H and grid.is_open(r + 1, c):
            edges += 1
    if edges != len(rooms) - 1:
        return f"{edges} passages for {len(rooms)} rooms (tree needs {len(rooms) - 1})"
    seen = {rooms[0]}
    stack = [rooms[0]]
    while stack:
        r, c = stack.pop()
        for dr, dc in ((0, 2), (0, -2), (2, 0), (-2, 0)):
            nr, nc = r + dr, c + dc
            if (nr, nc) in seen or not (0 < nr < H and 0 < nc < W):
                continue
            if grid.is_open(r + dr // 2, c + dc // 2):
                seen.add((nr, nc))
                stack.append((nr, nc))
    if len(seen) != len(rooms):
        return "rooms not connected"
    return ""


def check_gradients(seed: int = 37) -> tuple:
    """Analytic gradients vs central differences at a generic parameter point."""
    from .loss_learn import TabularModel

    pair = SchedulePair.all_linear()
    tgt = bundled_targets()["two_atom"]
    model = TabularModel(tgt.vocab_size, pair, tgt.prefix)
    rng = make_rng(seed)
    batch = draw_training_batch(tgt, pair, 64, rng, TrainConfig(seed=seed))
    _, gf, gg = batch_loss_and_grads(model, pair, batch, 0)
    prng = make_rng(seed + 1)
    for key in gf:
        model.f_logits[key] = prng.normal(size=tgt.vocab_size)
    for key in gg:
        model.g_raw[key] = prng.normal()
    _, gf, gg = batch_loss_and_grads(model, pair, batch, 0)

    def loss_now():
        return batch_loss_and_grads(model, pair, batch, 0)[0]

    coords = [("f", key, v) for key in gf for v in range(tgt.vocab_size)]
    coords += [("g", key, None) for key in gg]
    picks = prng.choice(len(coords), size=min(100, len(coords)), replace=False)
    h = 1e-5
    worst = 0.0
    for idx in picks:
        kind, key, v = coords[int(idx)]
        if kind == "f":
            row = model.f_logits[key]
            old = row[v]
            row[v] = old + h
            lp = loss_now()
            row[v] = old - h
            lm = loss_now()
            row[v] = old
            analytic = float(gf[key][v])
        else:
            gval = model.g_floor + math.exp(model.g_raw[key])
            old = model.g_raw[key]
            model.g_raw[key] = math.log(gval + h - model.g_floor)
            lp = loss_now()
            model.g_raw[key] = math.log(gval - h - model.g_floor)
            lm = loss_now()
            model.g_raw[key] = old
            analytic = float(gg[key])
        fd = (lp - lm) / (2 * h)
        rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-12)
        worst = max(worst, rel)
    if worst >= 1e-5:
        return False, f"worst relative error {worst:.2e} >= 1e-5"
    return True, f"{len(picks)} coordinates, worst relative error {worst:.2e}"


ACCEPTANCE = (
    ("kfe_exactness", check_kfe, False),
    ("gap_count_identity", check_gap_identity, False),
    ("vanilla_inference", check_vanilla, True),
    ("any_order_inference", check_adaptive, True),
    ("schedule_independence", check_beta_independence, True),
    ("minimizer_characterization", check_minimizer, True),
    ("kl_bound", check_kl_bound, True),
    ("length_fidelity", check_length_fidelity, True),
    ("maze_benchmark", check_maze, True),
    ("gradient_check", check_gradients, True),
)


def run_acceptance(names=None, seed_offset: int = 0) -> list:
    """Run the acceptance criteria (all by default); returns CriterionResult.

    `seed_offset` shifts each check's base seed, giving an independent
    replication of the whole suite; a failed stochastic check is retried
    once with a further +10000 shift before its verdict is final.
    """
    results = []
    for name, fn, stochastic in ACCEPTANCE:
        if names and name not in names:
            continue
        base = fn.__defaults__[0] if fn.__defaults__ else 0
        t0 = time.time()
        passed, detail = fn(base + seed_offset)
        retried = False
        if not passed and stochastic:
            passed, detail = fn(base + seed_offset + 10_000)
            retried = True
        results.append(
            CriterionResult(name, passed, detail, time.time() - t0, retried)
        )
    return results
