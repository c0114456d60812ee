"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -m acceptance -s`` to see the lines inline; they are also
collected into the "acceptance criteria" section of the terminal summary.
"""

import time

import numpy as np
import pytest

from actbit.allocator import (
    BitAllocation,
    PruneGuard,
    allocation_complexity_probe,
    average_bits,
    brute_force_allocate,
    greedy_allocate,
    objective,
    synthetic_table,
)
from actbit.cli import main
from actbit.model import (
    ChannelId,
    Layer,
    PolicyModel,
    action_jacobian_wrt_channel,
    channels,
    fd_jacobian_wrt_channel,
    forward,
)
from actbit.quant import ChannelQuantParams, apply_allocation, channel_scale, quantize_channel
from actbit.sensitivity import (
    SensitivityTable,
    cumulative_table,
    exact_single_step,
    exact_table,
    proxy_sensitivity,
    rank_consistency,
    two_stage_scores,
)
from actbit.simenv import rollout_deviations, teacher_forced_mse

from conftest import random_net
from conftest import record_criterion as record

pytestmark = pytest.mark.acceptance

EPISODES = 64


def uniform_alloc(chans, bit):
    return BitAllocation({c: bit for c in chans}, frozenset(chans))


@pytest.fixture(scope="module")
def fixture_table(policy, calib, designated):
    return two_stage_scores(policy, calib, designated, refine_fraction=0.25)


def test_criterion_01_quantizer():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    clamp_ok = True
    for bit in (2, 4, 8):
        for row in rng.normal(size=(1000, 32)) * rng.uniform(0.01, 10, size=(1000, 1)):
            p = channel_scale(row, bit)
            _, deq = quantize_channel(row, p)
            worst = max(worst, float(np.max(np.abs(row - deq) / (p.scale / 2 + 1e-12))))
            # shrink the step so the extremes saturate
            tight = ChannelQuantParams(bit, p.scale * 0.5)
            q, deq = quantize_channel(row, tight)
            hi, lo = row / tight.scale > tight.qmax + 0.5, row / tight.scale < tight.qmin - 0.5
            clamp_ok &= bool(np.all(q[hi] == tight.qmax) and np.all(q[lo] == tight.qmin))
            clamp_ok &= bool(np.all(deq[hi] == tight.qmax * tight.scale) and np.all(deq[lo] == tight.qmin * tight.scale))
    elapsed = time.perf_counter() - start
    passed = worst <= 1.0 and clamp_ok and elapsed < 1.0
    record(1, "quantizer correctness", passed, f"max err/(scale/2)={worst:.6f}, clamp exact={clamp_ok}, {elapsed:.2f}s")
    assert passed


def test_criterion_02_jacobian_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        depth = int(rng.integers(1, 5))
        dims = [int(d) for d in rng.integers(2, 9, size=depth + 1)]
        m = random_net(rng, dims, [str(a) for a in rng.choice(["tanh", "relu"], size=depth)])
        while True:
            x = rng.normal(size=dims[0])
            # kink guard: keep every relu pre-activation away from zero
            if all(np.min(np.abs(z)) >= 1e-3 for z in forward(m, x).pre):
                break
        for ch in channels(m):
            ja = action_jacobian_wrt_channel(m, x, ch)
            jf = fd_jacobian_wrt_channel(m, x, ch, 1e-5)
            norm = np.linalg.norm(ja)
            err = np.linalg.norm(ja - jf) / norm if norm > 0 else np.linalg.norm(jf) / 1e-5
            worst = max(worst, float(err))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-5 and elapsed < 10
    record(2, "Jacobian oracle", passed, f"max relative error {worst:.2e} over 50 nets, {elapsed:.2f}s")
    assert passed


def test_criterion_03_proxy_validity(policy, calib, designated):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for dims in ([4, 6, 2], [8, 5, 4, 2], [3, 7, 7, 3], [6, 2]):
        m = random_net(rng, dims, ["identity"])
        x = rng.normal(size=(256, dims[0]))
        for ch in channels(m):
            for bit in (2, 4, 8):
                exact = exact_single_step(m, x, ch, bit)
                proxy = proxy_sensitivity(m, x, ch, bit)
                if exact > 0:
                    worst = max(worst, abs(proxy - exact) / exact)
    proxy_t = two_stage_scores(policy, calib, designated, refine_fraction=0.0)
    exact_t = exact_table(policy, calib, designated)
    rho = rank_consistency(proxy_t, exact_t, 4)
    elapsed = time.perf_counter() - start
    passed = worst <= 0.2 and rho >= 0.8 and elapsed < 30
    record(3, "proxy validity", passed, f"linear max rel gap {worst:.2e}, fixture Spearman@4 {rho:.3f}, {elapsed:.2f}s")
    assert passed


def test_criterion_04_rank_consistency(policy, calib, env_cfg, designated):
    start = time.perf_counter()
    single = exact_table(policy, calib, designated)
    cumul = cumulative_table(policy, env_cfg, designated, episodes=16, seed=0, horizon=32)
    rho = rank_consistency(single, cumul, 4)
    elapsed = time.perf_counter() - start
    passed = rho >= 0.8 and elapsed < 60
    record(4, "rank consistency", passed, f"Spearman@4 {rho:.3f}, {elapsed:.2f}s")
    assert passed


def convex_table(rng, n=6):
    """Per-channel curves whose error per bit saved grows as bits drop."""
    r = np.sort(rng.exponential(size=(n, 4)), axis=1)
    s8 = 8 * r[:, 0]
    s4 = s8 + 4 * r[:, 1]
    s2 = s4 + 2 * r[:, 2]
    s0 = s2 + 2 * r[:, 3]
    return SensitivityTable(tuple(ChannelId(0, i) for i in range(n)), np.column_stack([s0, s2, s4, s8]))


def test_criterion_05_greedy_vs_brute_force():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    convex_equal = 0
    for _ in range(200):
        t = convex_table(rng)
        g, o = objective(t, greedy_allocate(t, budget=8)), objective(t, brute_force_allocate(t, budget=8))
        convex_equal += abs(g - o) <= 1e-12 * max(1.0, abs(o))
    within, dominance = 0, True
    for seed in range(200):
        t = synthetic_table(6, seed=10_000 + seed)
        g, o = objective(t, greedy_allocate(t, budget=8)), objective(t, brute_force_allocate(t, budget=8))
        dominance &= o <= g + 1e-12
        within += (g - o) <= 0.10 * o
    elapsed = time.perf_counter() - start
    passed = convex_equal == 200 and within >= 190 and dominance and elapsed < 60
    record(
        5,
        "greedy vs brute force",
        passed,
        f"convex exact {convex_equal}/200, arbitrary gap<=10% {within}/200, oracle<=greedy {dominance}, {elapsed:.2f}s",
    )
    assert passed


def test_criterion_06_budget_law(policy, fixture_table, designated):
    guard = PruneGuard.defaults(fixture_table, designated)
    details, passed = [], True
    for budget in (2, 4, 8, 12):
        a = greedy_allocate(fixture_table, designated, budget, guard)
        total = sum(a.assignment.values())
        last = a.demotions[-1]
        minimal = total + (last.from_bit - last.to_bit) > budget * len(designated)
        ok = average_bits(a) <= budget and minimal
        passed &= ok
        details.append(f"B={budget}: {average_bits(a):.4f}{'' if minimal else ' (not minimal)'}")
    record(6, "budget law", passed, ", ".join(details))
    assert passed


def test_criterion_07_gate_ratio():
    counts = {0: 1, 2: 5, 4: 22, 8: 56, 16: 16}
    bits = [b for b, k in counts.items() for _ in range(k)]
    chans = [ChannelId(0, i) for i in range(len(bits))]
    avg = average_bits(BitAllocation(dict(zip(chans, bits)), frozenset(chans)))
    passed = abs(avg - 8.02) <= 1e-12
    record(7, "gate-ratio average bits", passed, f"{avg!r}")
    assert passed


def test_criterion_08_mixed_beats_uniform(policy, calib, env_cfg, designated, fixture_table):
    start = time.perf_counter()
    guard = PruneGuard.defaults(fixture_table, designated)
    notes, mean_ok, episode_ok = [], True, True
    for act_bits in (16, 8):
        for budget in (4, 8):
            greedy = greedy_allocate(fixture_table, designated, budget, guard)
            q_g = apply_allocation(policy, greedy, act_bits, calib)
            q_u = apply_allocation(policy, uniform_alloc(designated, budget), act_bits, calib)
            mse_g, mse_u = teacher_forced_mse(policy, q_g, calib), teacher_forced_mse(policy, q_u, calib)
            dev_g, _ = rollout_deviations(env_cfg, policy, q_g, EPISODES, 8)
            dev_u, _ = rollout_deviations(env_cfg, policy, q_u, EPISODES, 8)
            cum_g, cum_u = dev_g.sum(axis=1), dev_u.sum(axis=1)
            violations = float(np.mean(cum_g > cum_u))
            mean_ok &= mse_g <= mse_u and cum_g.mean() <= cum_u.mean()
            episode_ok &= violations <= 0.02
            notes.append(
                f"A{act_bits}/B{budget}: MSE {mse_g:.3g}<={mse_u:.3g}, cum {cum_g.mean():.3g}<={cum_u.mean():.3g}, "
                f"episode violations {violations:.1%}"
            )
    elapsed = time.perf_counter() - start
    passed = mean_ok and episode_ok and elapsed < 120
    record(8, "mixed beats uniform", passed, f"means ok={mean_ok}, per-episode<=2% ok={episode_ok}; " + "; ".join(notes))
    assert passed


def test_criterion_09_temporal_accumulation(policy, env_cfg, designated, fixture_table):
    curves_ok = True
    finals = {}
    allocs = {b: uniform_alloc(designated, b) for b in (2, 4, 8)}
    allocs["greedy8"] = greedy_allocate(fixture_table, designated, 8, PruneGuard.defaults(fixture_table, designated))
    for name, alloc in allocs.items():
        dev, _ = rollout_deviations(env_cfg, policy, apply_allocation(policy, alloc), EPISODES, 9)
        curve = np.cumsum(dev.mean(axis=0))
        curves_ok &= bool(curve[0] >= 0 and np.all(np.diff(curve) >= 0))
        finals[name] = float(dev.sum(axis=1).mean())
    passed = curves_ok and finals[4] >= finals[8]
    record(9, "temporal accumulation", passed, f"non-decreasing={curves_ok}, final 4-bit {finals[4]:.4g} >= 8-bit {finals[8]:.4g}")
    assert passed


def redundant_vision(model: PolicyModel, k: int) -> PolicyModel:
    """Same function, each vision channel split into ``k`` identical copies feeding 1/k of the weight downstream."""
    vis, nxt = model.layers[0], model.layers[1]
    wide = Layer(np.repeat(vis.weight, k, axis=0), np.repeat(vis.bias, k), vis.activation, vis.tag)
    spread = Layer(np.repeat(nxt.weight, k, axis=1) / k, nxt.bias, nxt.activation, nxt.tag)
    return PolicyModel((wide, spread) + model.layers[2:])


def test_criterion_10_module_heterogeneity(policy, calib):
    model = redundant_vision(policy, 4)
    np.testing.assert_allclose(model.act(calib.observations[:50]), policy.act(calib.observations[:50]), atol=1e-12)
    chans = channels(model)
    table = exact_table(model, calib, chans)
    vis = [c for c in chans if model.layers[c.layer].tag == "vision"]
    head = [c for c in chans if model.layers[c.layer].tag == "action_head"]
    ratios = {b: float(table.column(b, head).mean() / table.column(b, vis).mean()) for b in (0, 2, 4, 8)}
    precondition = min(ratios.values()) >= 10
    alloc = greedy_allocate(table, chans, 8.0, PruneGuard.defaults(table, chans))
    head_bits = np.mean([alloc.assignment[c] for c in head])
    vis_bits = np.mean([alloc.assignment[c] for c in vis])
    passed = precondition and head_bits > vis_bits
    shown = ", ".join(f"{b}:{r:.1f}x" for b, r in ratios.items())
    record(10, "module heterogeneity", passed, f"head/vision sensitivity {shown}; mean bits head {head_bits:.2f} > vision {vis_bits:.3f}")
    assert passed


def test_criterion_11_scaling():
    allocation_complexity_probe(1000)  # warm-up
    t4 = min(allocation_complexity_probe(10_000, seed=s) for s in range(3))
    t5 = allocation_complexity_probe(100_000)
    ratio = t5 / t4
    passed = t5 < 5 and ratio < 30
    record(11, "allocation scaling", passed, f"1e4 {t4:.3f}s, 1e5 {t5:.3f}s, ratio {ratio:.1f}x")
    assert passed


def test_criterion_12_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("ACTBIT_THREADS", "1")
    assert main(["fixture", "--seed", "7", "--out", str(tmp_path / "fx")]) == 0
    model = str(tmp_path / "fx" / "model.json")
    outputs = {}
    for threads in ("1", "3", "8"):
        monkeypatch.setenv("ACTBIT_THREADS", threads)
        out = tmp_path / f"t{threads}"
        common = ["--model", model, "--seed", "7", "--out", str(out)]
        assert main(["sensitivity", *common]) == 0
        assert main(["allocate", *common, "--sensitivity", str(out / "sensitivity.csv"), "--budget", "6"]) == 0
        assert main(["rollout", *common, "--bitmap", str(out / "bitmap.json")]) == 0
        outputs[threads] = {
            name: (out / name).read_bytes()
            for name in ("sensitivity.csv", "bitmap.json", "summary.json", "report.json", "curve.csv")
        }
    identical = outputs["1"] == outputs["3"] == outputs["8"]
    record(12, "determinism", identical, "sensitivity/allocate/rollout outputs byte-identical under 1, 3, 8 workers")
    assert identical
