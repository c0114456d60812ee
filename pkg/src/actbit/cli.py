"""Command-line driver: fixture -> sensitivity -> allocate -> rollout, plus verify.

Every command reads and writes the JSON/CSV formats of the owning modules;
all randomness derives from ``--seed`` through named sub-streams.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import allocator, model as model_mod, quant, sensitivity, simenv
from .allocator import PruneGuard, average_bits, brute_force_allocate, greedy_allocate
from .model import load_model, save_model
from .sensitivity import SensitivityTable

log = logging.getLogger("actbit")

STREAMS = {"fixture": 0, "calib": 1, "rollout": 2, "verify": 3}


def stream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, STREAMS[name]]).generate_state(1)[0])


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _env(args) -> simenv.EnvConfig:
    cfg = simenv.load_env_config(args.env) if getattr(args, "env", None) else simenv.EnvConfig()
    return cfg.with_overrides(horizon=getattr(args, "horizon", None))


def _seed(args, cfg: simenv.EnvConfig) -> int:
    return cfg.init_seed if args.seed is None else args.seed


def _tags(args) -> tuple[str, ...]:
    return tuple(t for t in args.tags.split(",") if t)


def _calibration(args, model, cfg):
    return simenv.make_calibration(cfg, model, args.calib_traj, stream_seed(_seed(args, cfg), "calib"))


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1) + "\n")


def cmd_fixture(args) -> int:
    out = _out(args)
    seed = 0 if args.seed is None else args.seed
    cfg = simenv.EnvConfig(init_seed=seed).with_overrides(horizon=args.horizon)
    model = simenv.reference_policy(cfg, stream_seed(seed, "fixture"))
    save_model(model, out / "model.json")
    simenv.save_env_config(cfg, out / "env.json")
    print(f"wrote {out / 'model.json'} and {out / 'env.json'}")
    return 0


def cmd_sensitivity(args) -> int:
    out = _out(args)
    model = load_model(args.model)
    cfg = _env(args)
    calib = _calibration(args, model, cfg)
    chans = model_mod.channels(model, _tags(args))
    table = sensitivity.two_stage_scores(model, calib, chans, args.refine)
    table.save(out / "sensitivity.csv")
    n_exact = int(np.sum(table.methods == "exact_single_step"))
    print(f"scored {len(chans)} channels x 4 bit-widths ({n_exact} exact entries) -> {out / 'sensitivity.csv'}")
    return 0


def cmd_allocate(args) -> int:
    out = _out(args)
    model = load_model(args.model)
    cfg = _env(args)
    table = SensitivityTable.load(args.sensitivity)
    chans = model_mod.channels(model, _tags(args))
    if set(chans) != set(table.channels):
        raise ValueError(f"sensitivity table covers {len(table)} channels, designated layers have {len(chans)}")
    guard = PruneGuard.defaults(table, chans, args.tau_abs, args.tau_rel, args.prune_cap)
    alloc = greedy_allocate(table, chans, args.budget, guard)
    calib = _calibration(args, model, cfg) if args.act_bits != 16 else None
    qmodel = quant.apply_allocation(model, alloc, args.act_bits, calib)
    quant.save_bitmap(qmodel, out / "bitmap.json")

    summary = {
        "avg_bits": average_bits(alloc),
        "histogram": {str(b): n for b, n in alloc.histogram().items()},
        "pruned_fraction": alloc.pruned_fraction(),
        "objective": allocator.objective(table, alloc),
    }
    if args.oracle:
        if len(chans) > allocator.BRUTE_FORCE_LIMIT:
            log.warning("--oracle skipped: %d channels exceed the brute-force limit", len(chans))
        else:
            best = allocator.objective(table, brute_force_allocate(table, chans, args.budget))
            summary["oracle_objective"] = best
            summary["oracle_gap"] = (summary["objective"] - best) / best if best > 0 else 0.0
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary))
    return 0


def _load_quantized(args, model, cfg):
    alloc, act_bits, _ = quant.load_bitmap(args.bitmap)
    calib = _calibration(args, model, cfg)
    qmodel = quant.apply_allocation(model, alloc, act_bits, calib)
    return qmodel, calib


def cmd_rollout(args) -> int:
    out = _out(args)
    model = load_model(args.model)
    cfg = _env(args)
    qmodel, calib = _load_quantized(args, model, cfg)
    mode = "divergence" if args.divergence else "lockstep"
    report = simenv.rollout_pair(
        cfg, model, qmodel, args.episodes, stream_seed(_seed(args, cfg), "rollout"), calib, mode
    )
    report.save(out / "report.json", out / "curve.csv")
    print(
        f"success rate {report.success_rate:.4f}, "
        f"final cumulative deviation {report.final_deviation_mean:.6g}, "
        f"teacher-forced MSE {report.teacher_forced_mse:.6g}"
    )
    return 0


# -- verify -----------------------------------------------------------------


def _check_round_trip(rng) -> str | None:
    for bit in quant.GRID_BITS:
        rows = rng.normal(size=(200, 16))
        for row in rows:
            params = quant.channel_scale(row, bit)
            _, deq = quant.quantize_channel(row, params)
            if np.any(np.abs(row - deq) > params.scale / 2 + 1e-12):
                return f"{bit}-bit round-trip error above scale/2"
    return None


def _check_jacobian(model, rng) -> str | None:
    obs = rng.uniform(-1, 1, size=(8, model.input_dim))
    for x in obs:
        for ch in model_mod.channels(model):
            ja = model_mod.action_jacobian_wrt_channel(model, x, ch)
            jf = model_mod.fd_jacobian_wrt_channel(model, x, ch, 1e-5)
            if np.linalg.norm(ja - jf) > 1e-5 * max(np.linalg.norm(ja), 1e-8):
                return f"analytic/FD mismatch at channel {tuple(ch)}"
    return None


def _check_greedy(rng) -> str | None:
    for trial in range(20):
        table = allocator.synthetic_table(6, seed=int(rng.integers(1 << 31)))
        budget = float(rng.choice([2, 4, 8, 12]))
        g = greedy_allocate(table, budget=budget)
        o = brute_force_allocate(table, budget=budget)
        if average_bits(g) > budget:
            return f"greedy exceeds budget {budget}"
        if allocator.objective(table, o) > allocator.objective(table, g) + 1e-12:
            return "brute-force objective above greedy"
    return None


def _check_ranks(model, cfg, seed) -> str | None:
    calib = simenv.make_calibration(cfg, model, 64, seed)
    chans = model_mod.channels(model, model_mod.DESIGNATED_TAGS) or model_mod.channels(model)
    exact = sensitivity.exact_table(model, calib, chans)
    proxy = sensitivity.proxy_table(model, calib, chans)
    rho = sensitivity.rank_consistency(proxy, exact, 4)
    return None if rho >= 0.8 else f"proxy/exact Spearman {rho:.3f} < 0.8"


def _check_csv(path) -> str | None:
    SensitivityTable.load(path)
    return None


def _check_bitmap(args, model) -> str | None:
    alloc, _, _ = quant.load_bitmap(args.bitmap)
    data = json.loads(Path(args.bitmap).read_text())
    for a in data["assignments"]:
        if a["bits"] in quant.GRID_BITS:
            row = model.layers[a["layer"]].weight[a["channel"]]
            expect = quant.channel_scale(row, a["bits"]).scale
            if not np.isclose(a["scale"], expect, rtol=1e-12, atol=0):
                return f"scale of channel ({a['layer']}, {a['channel']}) disagrees with the model"
    if args.budget is not None and average_bits(alloc) > args.budget:
        return f"average bits {average_bits(alloc):.4f} exceed budget {args.budget}"
    return None


def cmd_verify(args) -> int:
    cfg = _env(args)
    seed = _seed(args, cfg)
    if args.model:
        model = load_model(args.model)
    else:
        model = simenv.reference_policy(cfg, stream_seed(seed, "fixture"))
    rng = np.random.default_rng(stream_seed(seed, "verify"))

    checks = [
        ("quantizer_round_trip", lambda: _check_round_trip(rng)),
        ("jacobian_fd", lambda: _check_jacobian(model, rng)),
        ("greedy_vs_brute_force", lambda: _check_greedy(rng)),
        ("rank_consistency", lambda: _check_ranks(model, cfg, stream_seed(seed, "calib"))),
    ]
    if args.sensitivity:
        checks.append(("sensitivity_csv", lambda: _check_csv(args.sensitivity)))
    if args.bitmap:
        checks.append(("bitmap_budget", lambda: _check_bitmap(args, model)))

    failures = 0
    for name, check in checks:
        try:
            problem = check()
        except (ValueError, KeyError, IndexError, OSError) as exc:
            problem = str(exc)
        if problem is None:
            print(f"PASS {name}")
        else:
            failures += 1
            print(f"FAIL {name}: {problem}")
            log.error("%s violated: %s", name, problem)
    return 1 if failures else 0


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actbit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        p.add_argument("--seed", type=int, default=None, help="root seed (default: env init_seed)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--env", default=None, help="environment config JSON")
        p.add_argument("--horizon", type=int, default=None, help="episode length override (default 32)")
        if model:
            p.add_argument("--model", required=True, help="model JSON")
            p.add_argument("--calib-traj", type=int, default=512, help="calibration trajectories")
            p.add_argument(
                "--tags",
                default=",".join(model_mod.DESIGNATED_TAGS),
                help="comma-separated layer tags designated for quantization",
            )

    p = sub.add_parser("fixture", help="write the reference policy and env config")
    common(p, model=False)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("sensitivity", help="score designated channels")
    common(p)
    p.add_argument("--refine", type=float, default=0.25, help="fraction re-scored exactly")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("allocate", help="greedy bit allocation from a sensitivity CSV")
    common(p)
    p.add_argument("--sensitivity", required=True)
    p.add_argument("--budget", type=float, default=8.0)
    p.add_argument("--act-bits", type=int, default=8, choices=quant.ACTIVATION_BITS)
    p.add_argument("--prune-cap", type=float, default=0.10)
    p.add_argument("--tau-abs", type=float, default=None, help="default: 1e-4 x mean 2-bit score")
    p.add_argument("--tau-rel", type=float, default=1.0)
    p.add_argument("--oracle", action="store_true", help="also solve exactly (<= 8 channels)")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("rollout", help="closed-loop comparison of quantized vs full precision")
    common(p)
    p.add_argument("--bitmap", required=True)
    p.add_argument("--episodes", type=int, default=16)
    p.add_argument("--divergence", action="store_true", help="compare independently evolving trajectories")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("verify", help="run the invariant and oracle checks")
    common(p, model=False)
    p.add_argument("--model", default=None)
    p.add_argument("--bitmap", default=None)
    p.add_argument("--budget", type=float, default=None)
    p.add_argument("--sensitivity", default=None)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(levelname)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, IndexError, OSError, allocator.InfeasibleBudget, simenv.FitError) as exc:
        print(f"actbit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
