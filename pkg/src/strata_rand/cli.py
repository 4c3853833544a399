"""Command-line front end.

Exit codes: 0 success, 1 domain or statistical error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np

from .core import CenteredArray, StrataLayout, build_centered_array, load_dataset, write_dataset
from .errors import StrataRandError
from .inference import am_test, ir_test
from .numerics import ScoreSpec, ranks_within_strata, score_transform
from .permute import check_coupling_properties
from .simharness import SimConfig, cell_design, rejection_table, simulate_replication, stream, table_text, write_table
from .stats import DEFAULT_EPS, clt_diagnostics, sigma_matrix, finite_pop_bridge


class UsageError(Exception):
    pass


def write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: str | None) -> None:
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("STRATA_RAND_THREADS", "1"))


def _require_seed(args, why: str) -> int:
    if args.seed is None:
        raise UsageError(f"--seed is required for {why}")
    return args.seed


def _rng(args):
    return None if args.seed is None else np.random.default_rng(args.seed)


def cmd_test_ir(args) -> int:
    if args.mode == "mc":
        _require_seed(args, "Monte Carlo p-values")
    data = load_dataset(args.input)
    report = ir_test(data, args.beta0, ScoreSpec(args.response_score), ScoreSpec(args.iv_score),
                     mode=args.mode, B=args.reps, rng=_rng(args), seed=args.seed,
                     min_effective=args.min_effective, tie_policy=args.ties)
    _emit(report.to_csv() if args.format == "csv" else report.to_json(), args.out)
    return 0


def cmd_test_am(args) -> int:
    if args.mode == "mc":
        _require_seed(args, "Monte Carlo p-values")
    data = load_dataset(args.input)
    report = am_test(data, args.beta0, ScoreSpec(args.score), variant=args.variant, mode=args.mode,
                     B=args.reps, rng=_rng(args), seed=args.seed, min_effective=args.min_effective,
                     tie_policy=args.ties)
    _emit(report.to_csv() if args.format == "csv" else report.to_json(), args.out)
    return 0


def cmd_simulate(args) -> int:
    seed = _require_seed(args, "simulation")
    if args.full_scale:
        config = SimConfig.full_scale(seed=seed)
    else:
        config = SimConfig(n=args.n, ks=tuple(args.k), rs=tuple(args.r), replications=args.reps, rho=args.rho,
                           lambda_strength=args.strength, seed=seed)
    if args.dataset_out:
        k, r = config.ks[0], config.rs[0]
        design = cell_design(config, k, r)
        write_dataset(simulate_replication(design, config, stream(seed, 2, k, r, 0)), args.dataset_out)
    rows = rejection_table(config, threads=_threads(args))
    if args.out:
        write_table(rows, args.out)
        print(table_text(rows), file=sys.stderr)
    else:
        sys.stdout.write(table_text(rows) + "\n")
    return 0


def _verify_coupling(args) -> list[tuple[str, bool, str]]:
    layouts = [(m,) for m in range(2, args.max_stratum + 1)]
    if args.max_stratum >= 3:
        layouts.append((2, 3))
    out = []
    for sizes in layouts:
        rep = check_coupling_properties(StrataLayout(sizes))
        out.append((f"coupling {list(sizes)}", rep.passed, f"{len(rep.checks)} checks, {rep.draws} states"))
    return out


def _verify_constants(args) -> list[tuple[str, bool, str]]:
    from .numerics import NORMAL, score_variance_factor

    out = []
    for ns, target in [(2, 0.37), (5, 0.56), (10, 0.69), (50, 0.89), (200, 0.96), (500, 0.98)]:
        v = score_variance_factor(ns, NORMAL)
        out.append((f"normal score variance n_s={ns}", abs(v - target) <= 0.005, f"{v:.4f} vs {target}"))
    return out


def _verify_moments(args) -> list[tuple[str, bool, str]]:
    from .permute import enumerate_permutation_array
    from .stats import ir_moments

    rng = np.random.default_rng(_require_seed(args, "random verification instances"))
    out = []
    for _ in range(args.instances):
        while True:
            sizes = tuple(int(x) for x in rng.integers(2, 6, size=rng.integers(1, 5)))
            if math.prod(math.factorial(s) for s in sizes) <= 10**5:
                break
        layout = StrataLayout(sizes)
        q, rho = rng.normal(size=layout.n), rng.normal(size=layout.n)
        perms = enumerate_permutation_array(layout)
        T = (rho[perms] * q).sum(axis=1)
        m = ir_moments(q, rho, layout)
        err_ir = max(abs(T.mean() - m.mu) / max(abs(m.mu), 1.0), abs(T.var() - m.sigma_sq) / m.sigma_sq)
        out.append((f"IR moments {list(sizes)}", err_ir <= 1e-10, f"rel err {err_ir:.2e}"))
    return out


def _verify_finite_pop(args) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(_require_seed(args, "random verification instances"))
    out = []
    for _ in range(args.instances):
        sizes = rng.integers(3, 9, size=rng.integers(1, 6))
        y = [rng.normal(size=s) * rng.uniform(0.5, 3) for s in sizes]
        n1 = [int(rng.integers(2, s)) for s in sizes]
        br = finite_pop_bridge(y, n1)
        out.append((f"sigma_n^2 = v^2 {list(int(s) for s in sizes)}", br.identity_gap <= 1e-12,
                    f"rel gap {br.identity_gap:.2e}"))
    return out


def cmd_verify(args) -> int:
    suites = {"coupling": _verify_coupling, "constants": _verify_constants,
              "moments": _verify_moments, "finite-pop": _verify_finite_pop}
    chosen = list(suites) if args.suite == "all" else [args.suite]
    results = []
    for name in chosen:
        results += suites[name](args)
    for label, ok, info in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {label}: {info}")
    passed = sum(ok for _, ok, _ in results)
    print(f"{passed}/{len(results)} checks passed")
    return 0 if passed == len(results) else 1


def cmd_diagnose(args) -> int:
    eps = tuple(args.eps) if args.eps else DEFAULT_EPS
    report: dict = {}
    if args.array:
        with open(args.array, encoding="utf-8") as fh:
            blocks = json.load(fh)["blocks"]
        layout = StrataLayout(tuple(len(b) for b in blocks))
        arr = CenteredArray.from_dense(blocks, layout)
        report["source"] = "array"
    else:
        if not args.input:
            raise UsageError("diagnose needs --input or --array")
        data = load_dataset(args.input)
        layout = data.layout
        if args.finite_pop:
            if args.n1 is None:
                raise UsageError("--finite-pop needs --n1")
            br = finite_pop_bridge(data.y, [args.n1] * layout.S, layout)
            arr = br.array
            report["finite_pop"] = {"ybar": br.ybar, "v_sq": br.v_sq, "sigma_n_sq": br.sigma_n_sq_from_bc,
                                    "relative_gap": br.identity_gap, "match": br.identity_gap <= 1e-12}
        else:
            if data.k == 0:
                raise UsageError("diagnose on a dataset needs instrument columns z1..zk")
            resid = data.y if data.d is None else data.y - args.beta0 * data.d
            spec = ScoreSpec(args.score)
            if spec.kind == "identity":
                c = resid
            else:
                c = score_transform(ranks_within_strata(resid, layout, args.ties, _rng(args)), spec)
            sigma, lam = sigma_matrix(data.z, c, layout)
            report["lambda_min"] = lam
            report["Sigma_n"] = sigma.tolist()
            arr = build_centered_array(data.z, c, layout, direction=np.ones(data.k) / math.sqrt(data.k))
        report["source"] = "dataset"
    diag = clt_diagnostics(arr, eps=eps, delta=args.delta, lambda_min=report.get("lambda_min"))
    report["diagnostics"] = diag.to_dict()
    report["n"], report["S"] = layout.n, layout.S
    if layout.singletons:
        report["warning"] = f"{len(layout.singletons)} strata of size 1 contribute nothing"
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strata-rand", description="Stratified randomization inference")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, stochastic=True):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if stochastic:
            sp.add_argument("--threads", type=int)

    scores = ["wilcoxon", "normal", "identity"]
    ir = sub.add_parser("test-ir", help="Imbens-Rosenbaum test")
    ir.add_argument("--input", required=True)
    ir.add_argument("--beta0", type=float, default=0.0)
    ir.add_argument("--response-score", choices=scores, default="wilcoxon")
    ir.add_argument("--iv-score", choices=scores, default="identity")
    ir.add_argument("--mode", choices=["asymptotic", "mc", "exact"], default="asymptotic")
    ir.add_argument("--reps", type=int, default=999)
    ir.add_argument("--ties", choices=["random", "error"], default="random")
    ir.add_argument("--min-effective", type=int, default=30)
    ir.add_argument("--format", choices=["json", "csv"], default="json")
    common(ir, stochastic=False)
    ir.set_defaults(func=cmd_test_ir)

    am = sub.add_parser("test-am", help="Andrews-Marmer rank test")
    am.add_argument("--input", required=True)
    am.add_argument("--beta0", type=float, default=0.0)
    am.add_argument("--score", choices=["wilcoxon", "normal"], default="normal")
    am.add_argument("--variant", choices=["star", "legacy"], default="star")
    am.add_argument("--mode", choices=["asymptotic", "mc"], default="asymptotic")
    am.add_argument("--reps", type=int, default=999)
    am.add_argument("--ties", choices=["random", "error"], default="random")
    am.add_argument("--min-effective", type=int, default=30)
    am.add_argument("--format", choices=["json", "csv"], default="json")
    common(am, stochastic=False)
    am.set_defaults(func=cmd_test_am)

    sim = sub.add_parser("simulate", help="null rejection table")
    sim.add_argument("--n", type=int, default=400)
    sim.add_argument("--k", type=int, nargs="+", default=[1])
    sim.add_argument("--r", type=int, nargs="+", default=[2, 5, 10, 25, 80])
    sim.add_argument("--reps", type=int, default=2000)
    sim.add_argument("--rho", type=float, default=0.5)
    sim.add_argument("--strength", type=float, default=9.0)
    sim.add_argument("--full-scale", action="store_true", help="5000 replications, k in {1, 3}")
    sim.add_argument("--dataset-out", help="also write one replication of the first cell as CSV")
    common(sim)
    sim.set_defaults(func=cmd_simulate)

    ver = sub.add_parser("verify", help="run exact verification oracles")
    ver.add_argument("--suite", choices=["coupling", "constants", "moments", "finite-pop", "all"], default="all")
    ver.add_argument("--max-stratum", type=int, default=3, choices=[2, 3, 4])
    ver.add_argument("--instances", type=int, default=20)
    ver.add_argument("--seed", type=int)
    ver.set_defaults(func=cmd_verify)

    dg = sub.add_parser("diagnose", help="Lindeberg/Lyapunov diagnostics")
    dg.add_argument("--input")
    dg.add_argument("--array", help="JSON file with dense blocks: {\"blocks\": [[[...]], ...]}")
    dg.add_argument("--score", choices=scores, default="identity")
    dg.add_argument("--beta0", type=float, default=0.0)
    dg.add_argument("--ties", choices=["random", "error"], default="random")
    dg.add_argument("--finite-pop", action="store_true")
    dg.add_argument("--n1", type=int)
    dg.add_argument("--eps", type=float, nargs="+")
    dg.add_argument("--delta", type=float, default=1.0)
    common(dg, stochastic=False)
    dg.set_defaults(func=cmd_diagnose)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StrataRandError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
