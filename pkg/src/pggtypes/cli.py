"""Command-line pipeline: simulate, cluster, fit-hiql, classify, report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import figures as fig
from .clustering import (
    ALGORITHMS,
    ClusterSolution,
    cluster,
    cvi_report,
    load_solution,
    save_cvi_report,
    save_solution,
    select_k,
)
from .core import GameConfig, Panel, discretize_panel, load_config, load_panel, save_panel
from .dtw import DIMS, dba_average, distance_matrix
from .env import ARCHETYPES, parse_census, simulate_panel
from .errors import FittingError, IngestionError, NumericError, PggTypesError
from .hiql import (
    EmConfig,
    HiqlModel,
    IntentionPosterior,
    align_order,
    cluster_initialized_fit,
    cv_fit,
    fit,
    load_model,
    load_posteriors,
    posteriors,
    save_model,
    save_posteriors,
    select_K,
)
from .metrics import (
    FIRST_ROUND_TYPES,
    SwitcherCriteria,
    classify_first_round,
    classify_switcher,
    cluster_metrics,
    drop_round,
    first_round_tests,
    responsiveness,
    save_metrics,
)
from .stability import bootstrap_stability, heterogeneity, save_heterogeneity_report, save_stability_report

log = logging.getLogger("pggtypes")

DEFAULT_CENSUS = ",".join(
    f"{kind}=20"
    for kind in (
        "free_rider",
        "unconditional_cooperator",
        "consistent_cooperator",
        "threshold_switcher",
        "farsighted_free_rider",
        "markov_switcher",
    )
)

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID = 0, 1, 2


# ---------------------------------------------------------------------------
# helpers


def parse_range(text: str) -> list[int]:
    """``2..10``, ``2-10`` or ``2,3,5`` to a list of ints."""
    text = text.strip()
    for sep in ("..", "-"):
        if sep in text:
            lo, hi = (int(v) for v in text.split(sep, 1))
            if hi < lo:
                raise IngestionError(f"empty range {text!r}")
            return list(range(lo, hi + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, args: argparse.Namespace, inputs: Sequence[Path]) -> None:
    """Flat ``key=value`` record of how the outputs were produced."""
    lines = [f"subcommand={command}", f"version={__version__}", f"seed={args.seed}"]
    skip = {"func", "command", "seed", "threads", "deterministic", "verbose"}
    for key in sorted(vars(args)):
        if key not in skip:
            lines.append(f"arg.{key}={getattr(args, key)}")
    for p in inputs:
        if p.is_file():
            lines.append(f"input.{p.name}={p} sha256:{_sha256(p)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _game_config(args) -> GameConfig:
    return args.game_config


def _read_panel(args) -> Panel:
    panel = load_panel(args.panel, _game_config(args).endowment)
    if len(panel) == 0:
        raise IngestionError("empty panel")
    return panel


def _read_clusters(path, panel: Panel) -> ClusterSolution:
    sol = load_solution(path)
    missing = set(sol.uids) - set(panel.uids)
    if missing:
        raise IngestionError(f"{len(missing)} clustered uids are not in the panel (e.g. {sorted(missing)[0]})")
    return sol


def _order_rows(values: np.ndarray) -> np.ndarray:
    """Row order by mean, lowest first; stable for ties."""
    return np.argsort(values.mean(axis=1), kind="stable")


def _align_model(model: HiqlModel, dataset) -> HiqlModel:
    if model.K != 2:
        return model
    order = align_order([p.probs for p in posteriors(model, dataset)], dataset)
    return model.permuted(order)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> list[Path]:
    cfg = replace(
        _game_config(args),
        rounds=args.rounds or _game_config(args).rounds,
        group_size=args.group_size or _game_config(args).group_size,
    )
    sim = simulate_panel(parse_census(args.census), cfg, args.seed)
    out = args.out
    save_panel(sim.panel, out / "panel.csv", cfg.endowment)
    _write_csv(out / "labels.csv", ["uid", "label"], ((u, sim.labels[u]) for u in sim.panel.uids))
    _write_csv(
        out / "intentions.csv",
        ["uid", "round", "intention"],
        ((u, r + 1, z) for u in sim.panel.uids if u in sim.intentions for r, z in enumerate(sim.intentions[u])),
    )
    print(f"simulated {len(sim.panel)} participants over {cfg.rounds} rounds")
    return []


def cmd_cluster(args) -> list[Path]:
    panel = _read_panel(args)
    out = args.out
    dims = args.dims
    dm = distance_matrix(panel, dims=dims, metric=args.distance, n_jobs=args.threads)
    if args.k:
        k = args.k
    else:
        report = cvi_report(dm, panel, parse_range(args.k_range), args.seed, args.algorithm, dims, args.threads)
        save_cvi_report(report, out / "cvi.csv")
        k = select_k(report, args.min_cluster_size)
    sol = cluster(dm, k, args.algorithm, args.seed, panel, dims)
    save_solution(sol, out / "clusters.csv")
    sol = sol.with_barycenters(panel, seed=args.seed)
    _write_csv(
        out / "barycenters.csv",
        ["cluster", "round", "action", "state", "action_q25", "action_q75", "state_q25", "state_q75"],
        (
            (c + 1, t + 1, b.actions[t], b.states[t], b.iqr_low[t, 0], b.iqr_high[t, 0], b.iqr_low[t, 1], b.iqr_high[t, 1])
            for c, b in enumerate(sol.barycenters)
            for t in range(len(b.actions))
        ),
    )
    drops = {t.uid: drop_round(t.actions) for t in panel}
    _write_csv(
        out / "drop_rounds.csv",
        ["uid", "cluster", "drop_round"],
        ((u, c, "" if drops[u] is None else drops[u]) for u, c in zip(sol.uids, sol.labels.tolist())),
    )
    het = heterogeneity(dm, sol, panel, dims=dims, seed=args.seed)
    save_heterogeneity_report(het, out / "heterogeneity.csv")
    if args.bootstrap:
        stab = bootstrap_stability(panel, sol, args.bootstrap, args.fraction, args.seed, dims, n_jobs=args.threads)
        save_stability_report(stab, out / "stability.csv")
    sub = panel.subset(sol.uids)
    A, S = sub.actions(), sub.states()
    for c in range(1, sol.k + 1):
        idx = sol.members(c)
        order = idx[_order_rows(A[idx])]
        fig.write_svg(fig.heatmap(A[order], f"cluster {c} actions (n={idx.size})"), out / f"heatmap_actions_c{c}.svg", args.deterministic)
        fig.write_svg(fig.heatmap(S[order], f"cluster {c} states (n={idx.size})"), out / f"heatmap_states_c{c}.svg", args.deterministic)
        b = sol.barycenters[c - 1]
        markers = sorted({drops[sol.uids[i]] for i in idx if drops[sol.uids[i]] is not None}) if args.distance == "euclidean" else ()
        plot = fig.band_plot(
            [
                ("action", b.actions, b.iqr_low[:, 0], b.iqr_high[:, 0], "#1f4e9f"),
                ("state", b.states, b.iqr_low[:, 1], b.iqr_high[:, 1], "#e08a00"),
            ],
            f"cluster {c} barycenter",
            markers=markers,
        )
        fig.write_svg(plot, out / f"barycenter_c{c}.svg", args.deterministic)
    print(f"k={sol.k} sizes={sol.sizes().tolist()}")
    return [Path(args.panel)]


def _em_config(args) -> EmConfig:
    return EmConfig(max_em_iter=args.max_em_iter, tol=args.tol)


def cmd_fit_hiql(args) -> list[Path]:
    panel = _read_panel(args)
    out = args.out
    data = discretize_panel(panel)
    by_uid = {d.uid: d for d in data}
    K = args.k_intentions
    cfg = _em_config(args)
    rows = []
    if args.k_range:
        sel, _ = select_K(data, parse_range(args.k_range), args.folds, args.repeats, args.seed, args.n_init, cfg, args.gamma, args.beta)
        _write_csv(
            out / "k_selection.csv",
            ["K", "test_ll", "bic", "delta_ll", "delta_bic"],
            ((k, ll, b, "" if dl is None else dl, "" if db is None else db) for k, ll, b, dl, db in sel.rows()),
        )
        print(f"recommended K={sel.K}")
    if args.repeats > 0:
        res = cv_fit(data, K, args.folds, args.repeats, args.seed, args.n_init, cfg, args.gamma, args.beta)
        model, report = res.model, res.report
        _write_csv(out / "cv_folds.csv", ["repeat", "fold", "train_ll", "test_ll"], report.cv)
        save_posteriors([res.posteriors[u] for u in sorted(res.posteriors)], out / "posteriors_cv.csv")
    else:
        model, report = fit(data, K, args.seed, args.n_init, cfg, args.gamma, args.beta)
    model = _align_model(model, data)
    save_model(model, out / "model_global.txt")
    save_posteriors(posteriors(model, data), out / "posteriors_global.csv")
    rows.append(("global", K, report.train_ll_per_decision, report.test_ll_per_decision, report.n_decisions, report.bic, report.chosen_init))
    if args.clusters:
        sol = _read_clusters(args.clusters, panel)
        for c in range(1, sol.k + 1):
            members = [by_uid[u] for u in sol.member_uids(c)]
            cm, crep = cluster_initialized_fit(members, model, cfg, seed=args.seed)
            cm = _align_model(cm, members)
            save_model(cm, out / f"model_c{c}.txt")
            save_posteriors(posteriors(cm, members), out / f"posteriors_c{c}.csv")
            rows.append((f"cluster_{c}", K, crep.train_ll_per_decision, "", crep.n_decisions, crep.bic, crep.chosen_init))
    _write_csv(out / "fit_report.csv", ["scope", "K", "train_ll", "test_ll", "n_decisions", "bic", "chosen_init"], rows)
    return [Path(args.panel)] + ([Path(args.clusters)] if args.clusters else [])


def _cluster_models(fit_dir: Path) -> list[tuple[int, HiqlModel, list[IntentionPosterior]]]:
    found = []
    for path in sorted(fit_dir.glob("model_c*.txt"), key=lambda p: int(p.stem[7:])):
        c = int(path.stem[7:])
        post = fit_dir / f"posteriors_c{c}.csv"
        if not post.is_file():
            raise IngestionError(f"{post} is missing")
        found.append((c, load_model(path), load_posteriors(post)))
    if not found:
        raise IngestionError(f"{fit_dir}: no per-cluster models (run fit-hiql with --clusters)")
    return found


def cmd_classify(args) -> list[Path]:
    out = args.out
    criteria = SwitcherCriteria(args.stickiness_max, args.switching_min, args.volatility_min)
    models = _cluster_models(Path(args.fit_dir))
    metrics = [cluster_metrics(c, [p.probs[:, 0] for p in post], m.lam) for c, m, post in models]
    save_metrics(metrics, out / "metrics.csv", criteria)
    _write_csv(
        out / "scatter.csv",
        ["cluster", "stickiness", "switching_rate", "is_switcher"],
        ((m.cluster, m.stickiness, m.switching_rate, int(classify_switcher(m, criteria))) for m in metrics),
    )
    points = [(m.stickiness, m.switching_rate, f"C{m.cluster}", classify_switcher(m, criteria)) for m in metrics]
    fig.write_svg(
        fig.scatter(points, criteria.stickiness_max, criteria.switching_min, "switcher criteria", "stickiness", "switching rate"),
        out / "scatter.svg",
        args.deterministic,
    )
    inputs = [Path(args.fit_dir) / "fit_report.csv"]
    if args.panel:
        panel = _read_panel(args)
        counts = {t: 0 for t in FIRST_ROUND_TYPES}
        for t in panel:
            counts[classify_first_round(float(t.actions[0]))] += 1
        _write_csv(out / "first_round.csv", ["type", "count", "share"], ((t, n, n / len(panel)) for t, n in counts.items()))
        inputs.append(Path(args.panel))
        if args.clusters:
            sol = _read_clusters(args.clusters, panel)
            sub = panel.subset(sol.uids)
            resp = responsiveness(sub, sol.assignment)
            _write_csv(out / "responsiveness.csv", ["cluster", "r", "degenerate", "n_pairs"], ((c, v.r, int(v.degenerate), v.n_pairs) for c, v in resp.items()))
            tests = first_round_tests(sub, sol.assignment)
            _write_csv(out / "first_round_tests.csv", ["cluster", "mean", "rest_mean", "t", "df", "p"], ((x.cluster, x.mean, x.rest_mean, x.t, x.df, x.p) for x in tests))
            inputs.append(Path(args.clusters))
    n_sw = sum(classify_switcher(m, criteria) for m in metrics)
    print(f"{n_sw} of {len(metrics)} clusters meet all switcher criteria")
    return inputs


def _posterior_band(post: list[IntentionPosterior], seed: int):
    X = np.stack([p.probs[:, :1] for p in post])
    center, _ = dba_average(X, seed=seed)
    return center[:, 0], np.percentile(X[:, :, 0], 25, axis=0), np.percentile(X[:, :, 0], 75, axis=0)


def cmd_report(args) -> list[Path]:
    panel = _read_panel(args)
    sol = _read_clusters(args.clusters, panel).with_barycenters(panel, seed=args.seed)
    sub = panel.subset(sol.uids)
    A, S = sub.actions(), sub.states()
    models = {c: (m, post) for c, m, post in _cluster_models(Path(args.fit_dir))}
    heat, bary, post_row, lam_row = [], [], [], []
    for c in range(1, sol.k + 1):
        idx = sol.members(c)
        order = idx[_order_rows(A[idx])]
        heat.append(fig.grid([fig.heatmap(A[order], f"C{c} actions"), fig.heatmap(S[order], f"C{c} states")], 2))
        b = sol.barycenters[c - 1]
        bary.append(
            fig.band_plot(
                [
                    ("action", b.actions, b.iqr_low[:, 0], b.iqr_high[:, 0], "#1f4e9f"),
                    ("state", b.states, b.iqr_low[:, 1], b.iqr_high[:, 1], "#e08a00"),
                ],
                f"C{c} barycenter",
            )
        )
        if c in models:
            m, post = models[c]
            center, lo, hi = _posterior_band(post, args.seed)
            post_row.append(fig.band_plot([("intention 1", center, lo, hi, "#2a9d4b")], f"C{c} intention 1"))
            lam_row.append(fig.transition_diagram(m.lam, f"C{c} transitions"))
    rows = [fig.grid(heat, len(heat)), fig.grid(bary, len(bary))]
    if post_row:
        rows += [fig.grid(post_row, len(post_row)), fig.grid(lam_row, len(lam_row))]
    fig.write_svg(fig.stack(rows, title="cluster report"), args.out / "report.svg", args.deterministic)
    _write_csv(
        args.out / "report_clusters.csv",
        ["cluster", "n", "mean_action", "mean_state"],
        ((c, int(sol.members(c).size), float(A[sol.members(c)].mean()), float(S[sol.members(c)].mean())) for c in range(1, sol.k + 1)),
    )
    return [Path(args.panel), Path(args.clusters)]


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value game config (endowment, multiplier, group_size, rounds, seed)")
    common.add_argument("--seed", type=int, default=None, help="random seed (default: config seed or 0)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for distance matrices")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="omit the timestamp comment from SVG output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pggtypes", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a labeled synthetic panel")
    p.add_argument("--census", default=DEFAULT_CENSUS, help=f"kind=count list; kinds: {', '.join(ARCHETYPES)}")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--group-size", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cluster", parents=[common], help="DTW clustering with k selection and barycenters")
    p.add_argument("--panel", required=True)
    p.add_argument("--k", type=int, default=None, help="fixed k (skips the CVI sweep)")
    p.add_argument("--k-range", default="2..20")
    p.add_argument("--min-cluster-size", type=int, default=30)
    p.add_argument("--distance", choices=("dtw", "euclidean"), default="dtw")
    p.add_argument("--algorithm", choices=ALGORITHMS, default="spectral")
    p.add_argument("--dims", choices=sorted(DIMS), default="joint")
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap replications (0 skips)")
    p.add_argument("--fraction", type=float, default=0.8)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("fit-hiql", parents=[common], help="global and per-cluster HIQL fits")
    p.add_argument("--panel", required=True)
    p.add_argument("--clusters", default=None, help="clusters.csv from the cluster subcommand")
    p.add_argument("--k-intentions", type=int, default=2)
    p.add_argument("--k-range", default=None, help="also run K selection over this range")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=10, help="CV repeats (0 fits the full data only)")
    p.add_argument("--n-init", type=int, default=10)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--max-em-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_fit_hiql)

    p = sub.add_parser("classify", parents=[common], help="switcher metrics from per-cluster fits")
    p.add_argument("--fit-dir", required=True)
    p.add_argument("--panel", default=None)
    p.add_argument("--clusters", default=None)
    p.add_argument("--stickiness-max", type=float, default=0.15)
    p.add_argument("--switching-min", type=float, default=0.35)
    p.add_argument("--volatility-min", type=float, default=0.25)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("report", parents=[common], help="master panel SVG")
    p.add_argument("--panel", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--fit-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        game, cfg_seed = load_config(args.config) if args.config else (GameConfig(), None)
        args.game_config = game
        if args.seed is None:
            args.seed = cfg_seed if cfg_seed is not None else 0
        if args.threads < 1:
            raise IngestionError("--threads must be at least 1")
        args.out = Path(args.out)
        args.out.mkdir(parents=True, exist_ok=True)
        inputs = args.func(args)
        if args.config:
            inputs = [Path(args.config)] + list(inputs)
        game_args = argparse.Namespace(**{k: v for k, v in vars(args).items() if k != "game_config"})
        write_manifest(args.out, args.command, game_args, inputs)
    except (FittingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (PggTypesError, OSError, csv.Error, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        log.debug("internal error", exc_info=True)
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
