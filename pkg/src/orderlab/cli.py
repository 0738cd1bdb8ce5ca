"""Command-line entry point: one subcommand per pipeline stage.

    orderlab train-ref   --config run.toml
    orderlab build-store --config run.toml --jobs 4
    orderlab estimate    --config run.toml --perm 3,1,2,0 --mode futpp
    orderlab absdiff | curriculum | memgen | timing  --config run.toml [--oracle]

Artifacts land in the output directory (``--out`` > $ORDERLAB_OUT > config
``out``). Every command writes its reports plus a manifest under
``manifests/`` holding digests, versions and wall time; the reports
themselves carry no timestamps, so reruns reproduce them byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (RANDOM, absdiff_eval, generalization_curves, memorization_heatmap, pearson, pinned_finals,
                       recency_score, sample_permutations, timing_compare, trend_slopes)
from .config import RunConfig, load_config
from .curriculum import STRATEGIES, GAConfig, baseline_order, ga_search
from .data import IngestConfig, ingest, load_corpus, save_corpus, synth_regression, synth_text
from .errors import ConfigError, DependencyError, InputError, OrderLabError
from .estimator import FUT, FUTPP, EstimatorConfig, estimate, estimate_performance, identity, parse_permutation
from .models import MLPRegressor, TinyLM
from .numerics import make_rng
from .store import StoreOptions, build_store, load_store, save_store
from .trainer import AdamConfig, load_trajectory, retrain_oracle, save_trajectory, train_reference

log = logging.getLogger("orderlab")

CORPUS, TRAJECTORY, STORE = "corpus.olc", "trajectory.olt", "store.ols"
PRODUCER = {CORPUS: "train-ref", TRAJECTORY: "train-ref", STORE: "build-store"}
EXIT_CODES = {"config": 2, "dependency": 3, "corruption": 4}


# --- helpers ----------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_grid(path: Path, grid: np.ndarray):
    T = grid.shape[1]
    write_csv(path, ["batch"] + [f"pos{j}" for j in range(T)],
              [[i] + [repr(float(v)) for v in row] for i, row in enumerate(grid)])


def adam_config(cfg: RunConfig) -> AdamConfig:
    a = cfg.adam
    return AdamConfig(a.lr, a.beta1, a.beta2, a.eps)


def estimator_config(cfg: RunConfig, mode: str | None = None) -> EstimatorConfig:
    e = cfg.estimator
    return EstimatorConfig(mode or e.mode, e.c, e.clip_bound, e.clip_target)


def store_options(cfg: RunConfig, jobs: int = 1) -> StoreOptions:
    s = cfg.store
    return StoreOptions(compress=s.compress, k_ladder=s.k_ladder, second_order=s.second_order,
                        seed=cfg.sub_seed("store"), div_eps_rel=s.div_eps_rel,
                        moment_derivatives=s.moment_derivatives, jobs=jobs)


def make_corpus(cfg: RunConfig):
    d = cfg.data
    seed = cfg.sub_seed("data")
    if d.source == "synth_text":
        return synth_text(seed, n_docs=d.n_docs, T=d.T, seq_len=d.seq_len, n_topics=d.n_topics)
    if d.source == "synth_regression":
        return synth_regression(seed, d.n_samples, cfg.model.dim, T=d.T, noise=d.noise, split=d.split)
    icfg = IngestConfig(T=d.T, min_length=d.min_length, num_permutations=d.num_permutations, split=d.split,
                        seq_len=d.seq_len, seed=seed)
    return ingest(d.paths, icfg)


def make_model(cfg: RunConfig, corpus, hidden: int | None = None):
    m = cfg.model
    hidden = m.hidden if hidden is None else hidden
    if m.kind == "tiny_lm":
        return TinyLM(corpus.vocab_size, context=m.context, embed=m.embed, hidden=hidden, init_scale=m.init_scale)
    return MLPRegressor(m.dim, hidden=hidden, init_scale=m.init_scale)


def read_permutations(arg: str | None, T: int) -> list[tuple[int, ...]]:
    """``identity``, a comma list, or ``@FILE`` with one permutation per line."""
    if arg is None or arg == "identity":
        return [identity(T)]
    if arg.startswith("@"):
        path = Path(arg[1:])
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise InputError(f"cannot read permutation file {path}: {exc}") from None
        perms = [parse_permutation(ln, T) if ln.strip() != "identity" else identity(T)
                 for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
        if not perms:
            raise InputError(f"permutation file {path} is empty")
        return perms
    return [parse_permutation(arg, T)]


class Stage:
    """Bookkeeping shared by every subcommand: paths, digests and the manifest."""

    def __init__(self, name: str, cfg: RunConfig, out: Path, force: bool, jobs: int):
        self.name, self.cfg, self.out, self.force, self.jobs = name, cfg, out, force, jobs
        self.digest = cfg.digest()
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.t0 = time.perf_counter()
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        path = self.path(name)
        if not path.exists():
            raise DependencyError(f"{self.name} needs {path}; run `orderlab {PRODUCER[name]}` first")
        self.inputs[name] = file_digest(path)
        return path

    def check_digest(self, name: str, found: str | None):
        if found == self.digest:
            return
        msg = (f"{name} was produced under config digest {found}, the current config digest is {self.digest}; "
               f"rerun `orderlab {PRODUCER[name]}` or pass --force")
        if not self.force:
            raise DependencyError(msg)
        log.warning("%s (continuing because of --force)", msg)

    def load_corpus(self):
        corpus = load_corpus(self.require(CORPUS))
        self.check_digest(CORPUS, corpus.meta.get("config_digest"))
        return corpus

    def load_trajectory(self):
        traj, extra = load_trajectory(self.require(TRAJECTORY), with_extra=True)
        self.check_digest(TRAJECTORY, extra.get("config_digest"))
        return traj

    def load_store(self, layout):
        store, extra = load_store(self.require(STORE), layout, with_extra=True)
        self.check_digest(STORE, extra.get("config_digest"))
        return store

    def load_all(self, need_store: bool = True):
        corpus = self.load_corpus()
        model = make_model(self.cfg, corpus)
        traj = self.load_trajectory()
        store = self.load_store(model.param_template) if need_store else None
        return corpus, model, traj, store

    def wrote(self, *names: str):
        self.outputs.extend(names)

    def map_fn(self):
        if self.jobs <= 1:
            return map, None
        pool = ThreadPoolExecutor(self.jobs)
        return pool.map, pool

    def finish(self) -> dict:
        manifest = {
            "command": self.name,
            "config_digest": self.digest,
            "config": self.cfg.to_dict(),
            "inputs": self.inputs,
            "outputs": {n: file_digest(self.path(n)) for n in self.outputs},
            "versions": {"orderlab": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "jobs": self.jobs,
            "started_at": self.started,
            "wall_time_s": time.perf_counter() - self.t0,
        }
        manifest.update(self.extra)
        mdir = self.out / "manifests"
        mdir.mkdir(exist_ok=True)
        write_json(mdir / f"{self.name}.json", manifest)
        return manifest


# --- commands ---------------------------------------------------------------


def cmd_train_ref(st: Stage, args):
    cfg = st.cfg
    corpus = make_corpus(cfg)
    corpus.meta["config_digest"] = st.digest
    model = make_model(cfg, corpus)
    theta0 = model.init_params(cfg.sub_seed("init"))
    traj = train_reference(model, corpus, identity(corpus.T), adam_config(cfg), theta0)
    first, last = model.evaluate(traj.thetas[0], corpus.validation), model.evaluate(traj.thetas[-1], corpus.validation)
    save_corpus(corpus, st.path(CORPUS))
    save_trajectory(traj, st.path(TRAJECTORY), {"config_digest": st.digest, "model": model.spec()})
    write_json(st.path("train_ref.json"), {
        "config_digest": st.digest,
        "T": corpus.T,
        "n_params": int(traj.thetas.shape[1]),
        "losses": traj.losses.tolist(),
        "initial_metric": first.metric,
        "final_metric": last.metric,
        "final_loss": last.loss,
    })
    st.wrote(CORPUS, TRAJECTORY, "train_ref.json")
    return {"final_metric": last.metric}


def cmd_build_store(st: Stage, args):
    corpus, model, traj, _ = st.load_all(need_store=False)
    t0 = time.perf_counter()
    store = build_store(traj, model, corpus, store_options(st.cfg, st.jobs))
    st.extra["build_seconds"] = time.perf_counter() - t0
    save_store(store, st.path(STORE), {"config_digest": st.digest})
    write_json(st.path("build_store.json"), {
        "config_digest": st.digest,
        "T": store.T,
        "stored_bytes": store.stored_bytes(),
        "raw_bytes": store.raw_bytes(),
        "grad_evals": store.meta["grad_evals"],
        "error_bounds": store.meta["error_bounds"],
        "second_order": store.includes_second_order,
    })
    st.wrote(STORE, "build_store.json")
    return {}


def cmd_estimate(st: Stage, args):
    corpus, model, traj, store = st.load_all()
    ecfg = estimator_config(st.cfg, args.mode)
    perms = read_permutations(args.perm, store.T)
    val = corpus.validation
    records = []
    for perm in perms:
        est = estimate(store, traj, perm, ecfg)
        res = model.evaluate(est.final, val)
        rec = {"perm": list(perm), "mode": ecfg.mode, "config_digest": st.digest, "final_ppl": res.perplexity,
               "metric": res.metric, "loss": res.loss}
        if args.per_step:
            rec["per_step_metric"] = [r.metric for r in estimate_performance(est, model, val, "all")]
            if res.perplexity is not None:
                rec["per_step_ppl"] = rec["per_step_metric"]
        if args.oracle:
            _, evals = retrain_oracle(model, corpus, perm, traj.config, traj.theta(0), val, "final")
            rec["oracle_metric"] = evals[-1].metric
            rec["abs_diff"] = abs(res.metric - evals[-1].metric)
        records.append(rec)
    write_json(st.path("estimate.json"), {"config_digest": st.digest, "results": records})
    st.wrote("estimate.json")
    for rec in records:
        print(json.dumps(rec, sort_keys=True))
    return {}


def cmd_absdiff(st: Stage, args):
    corpus, model, traj, store = st.load_all()
    methods = [FUT, FUTPP, RANDOM] if store.includes_second_order else [FUT, RANDOM]
    mapper, pool = st.map_fn()
    try:
        reports = absdiff_eval(store, traj, model, corpus, N=st.cfg.analysis.absdiff_n, methods=methods,
                               seed=st.cfg.sub_seed("absdiff"), est_config=estimator_config(st.cfg), map_fn=mapper)
    finally:
        if pool:
            pool.shutdown()
    write_json(st.path("absdiff.json"), {"config_digest": st.digest,
                                         "methods": {m: r.to_dict() for m, r in reports.items()}})
    rows = [[m, k, " ".join(map(str, p)), repr(float(r.r_true[k])), repr(float(r.r_hat[k]))]
            for m, r in reports.items() for k, p in enumerate(r.perms)]
    write_csv(st.path("absdiff.csv"), ["method", "k", "perm", "r", "r_hat"], rows)
    st.wrote("absdiff.json", "absdiff.csv")
    summary = {m: r.absdiff for m, r in reports.items()}
    print(json.dumps({"absdiff": summary}, sort_keys=True))
    return {}


def _train_weak(cfg: RunConfig, corpus):
    model = make_model(cfg, corpus, hidden=cfg.model.weak_hidden)
    traj = train_reference(model, corpus, identity(corpus.T), adam_config(cfg), model.init_params(cfg.sub_seed("weak")))
    return model, traj.thetas[-1]


def cmd_curriculum(st: Stage, args):
    corpus, model, traj, store = st.load_all()
    cfg, val = st.cfg, corpus.validation
    ecfg = estimator_config(cfg, args.mode)
    g = cfg.ga
    gcfg = GAConfig(population=g.population, generations=g.generations, mutation_prob=g.mutation_prob,
                    seed=cfg.sub_seed("ga"), inject_identity=g.inject_identity, jobs=st.jobs)
    result = ga_search(store, traj, model, val, gcfg, ecfg)

    ref = (model, traj.thetas[-1])
    refs = {"reference": ref, "strong": ref, "weak": _train_weak(cfg, corpus)}
    orders = {"GA": result.best_perm}
    for name in STRATEGIES:
        orders[name] = baseline_order(corpus, name, refs, seed=cfg.sub_seed("baseline"))

    rows = {}
    for name, perm in orders.items():
        rows[name] = {"perm": list(perm), "estimated_metric": model.metric(estimate(store, traj, perm, ecfg).final, val)}
    report = {"config_digest": st.digest, "mode": ecfg.mode, "orders": rows, "evaluations": result.evaluations,
              "history": result.history}
    if args.oracle:
        def oracle(perm):
            return retrain_oracle(model, corpus, perm, traj.config, traj.theta(0), val, "final")[1][-1].metric

        mapper, pool = st.map_fn()
        try:
            for name, r in zip(rows, mapper(oracle, [tuple(v["perm"]) for v in rows.values()])):
                rows[name]["oracle_metric"] = r
            rng = make_rng(cfg.sub_seed("curriculum"), "random_orders")
            randoms = sample_permutations(corpus.T, g.random_orders, rng)
            rand_metrics = list(mapper(oracle, randoms))
        finally:
            if pool:
                pool.shutdown()
        report["random_orders"] = [{"perm": list(p), "oracle_metric": r} for p, r in zip(randoms, rand_metrics)]
        report["random_median"] = float(np.median(rand_metrics))
        report["ga_beats_median"] = bool(rows["GA"]["oracle_metric"] <= report["random_median"])
    write_json(st.path("curriculum.json"), report)
    write_csv(st.path("ga_history.csv"), ["generation", "best_fitness", "median_fitness", "evaluations", "best_genome"],
              [[h["generation"], repr(h["best_fitness"]), repr(h["median_fitness"]), h["evaluations"],
                " ".join(map(str, h["best_genome"]))] for h in result.history])
    st.wrote("curriculum.json", "ga_history.csv")
    print(json.dumps({"best_perm": list(result.best_perm), "best_fitness": result.best_fitness}))
    return {}


def _memgen_outputs(st: Stage, tag: str, heat, curves):
    write_grid(st.path(f"heatmap_{tag}.csv"), heat.grid)
    write_grid(st.path(f"curves_{tag}.csv"), curves.curves)
    st.wrote(f"heatmap_{tag}.csv", f"curves_{tag}.csv")
    return {
        "recency_spearman": recency_score(heat.grid),
        "trend_slopes": trend_slopes(curves.curves).tolist(),
        "similarity": curves.similarity.tolist(),
        "tau": curves.tau,
        "high": curves.high,
        "low": curves.low,
        "group_means": curves.group_means,
    }


def cmd_memgen(st: Stage, args):
    corpus, model, traj, store = st.load_all()
    cfg = st.cfg
    N, seed = cfg.analysis.heatmap_n, cfg.sub_seed("memgen")
    ecfg = estimator_config(cfg, args.mode)
    sidecar = {"config_digest": st.digest, "N": N, "rows": "batch", "columns": "position", "modes": {}}
    runs = [(ecfg.mode, False)] + ([("oracle", True)] if args.oracle else [])
    grids = {}
    for tag, oracle in runs:
        finals = pinned_finals(store, traj, model, corpus, N, seed, oracle, ecfg)
        heat = memorization_heatmap(store, traj, model, corpus, N, seed, oracle, ecfg, finals)
        curves = generalization_curves(store, traj, model, corpus, None, N, seed, oracle, ecfg, finals)
        sidecar["modes"][tag] = _memgen_outputs(st, tag, heat, curves)
        grids[tag] = (heat.grid, curves)
    if args.oracle:
        est_heat, est_curves = grids[ecfg.mode]
        orc_heat, orc_curves = grids["oracle"]
        high = orc_curves.high
        agree = np.sign(trend_slopes(est_curves.curves[high])) == np.sign(trend_slopes(orc_curves.curves[high]))
        sidecar["heatmap_pearson"] = pearson(est_heat, orc_heat)
        sidecar["high_group_slope_agreement"] = float(agree.mean()) if high else None
    write_json(st.path("memgen.json"), sidecar)
    st.wrote("memgen.json")
    return {}


def cmd_timing(st: Stage, args):
    corpus, model, traj, store = st.load_all()
    bm = st.out / "manifests" / "build-store.json"
    if not bm.exists():
        raise DependencyError(f"timing needs {bm}; run `orderlab build-store` first")
    build_s = json.loads(bm.read_text(encoding="utf-8"))["build_seconds"]
    a = st.cfg.analysis
    ecfg = estimator_config(st.cfg, args.mode)
    rng = make_rng(st.cfg.sub_seed("timing"), "orders")
    perms = sample_permutations(store.T, max(a.timing_orders, a.timing_retrain_orders), rng)
    t0 = time.perf_counter()
    for p in perms[: a.timing_orders]:
        model.metric(estimate(store, traj, p, ecfg).final, corpus.validation)
    est_s = (time.perf_counter() - t0) / a.timing_orders
    t0 = time.perf_counter()
    for p in perms[: a.timing_retrain_orders]:
        retrain_oracle(model, corpus, p, traj.config, traj.theta(0), corpus.validation, "final")
    retrain_s = (time.perf_counter() - t0) / a.timing_retrain_orders
    rows = timing_compare(build_s, est_s, retrain_s, a.timing_n)
    write_csv(st.path("timing.csv"), ["N", "amortized_estimate_s", "retrain_s", "speedup"],
              [[r["N"], r["amortized_estimate_s"], r["retrain_s"], r["speedup"]] for r in rows])
    write_json(st.path("timing.json"), {"config_digest": st.digest, "build_s": build_s,
                                        "per_order_estimate_s": est_s, "per_order_retrain_s": retrain_s,
                                        "rows": rows})
    st.wrote("timing.csv", "timing.json")
    return {}


COMMANDS = {
    "train-ref": (cmd_train_ref, "train the reference model and record its trajectory"),
    "build-store": (cmd_build_store, "precompute update terms for every (checkpoint, batch) pair"),
    "estimate": (cmd_estimate, "estimate final performance under given batch orders"),
    "absdiff": (cmd_absdiff, "compare estimates with retraining over sampled orders"),
    "curriculum": (cmd_curriculum, "search for a good batch order and score the baselines"),
    "memgen": (cmd_memgen, "memorization heatmap and generalization curves"),
    "timing": (cmd_timing, "amortized estimation cost versus retraining"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration (defaults apply if omitted)")
    common.add_argument("--out", type=Path, help="output directory (overrides $ORDERLAB_OUT and the config)")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")
    common.add_argument("--mode", choices=[FUT, FUTPP], help="estimator variant (default from config)")
    common.add_argument("--perm", help="comma list, @FILE with one order per line, or 'identity'")
    common.add_argument("--oracle", action="store_true", help="also retrain to obtain ground truth")
    common.add_argument("--force", action="store_true", help="accept artifacts from a different config")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="orderlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"orderlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, helptext) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=helptext, description=helptext)
    sub.choices["estimate"].add_argument("--per-step", action="store_true",
                                         help="also report the metric after every step")
    return parser


def resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out = args.out or os.environ.get("ORDERLAB_OUT") or cfg.out
    return cfg, Path(out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg, out = resolve(args)
        st = Stage(args.command, cfg, out, args.force, args.jobs)
        COMMANDS[args.command][0](st, args)
        manifest = st.finish()
        log.info("%s done in %.2fs -> %s", args.command, manifest["wall_time_s"], out)
        return 0
    except OrderLabError as exc:
        return _fail(args.command, exc.code, exc)
    except OSError as exc:
        return _fail(args.command, "persistence", exc)
    except Exception as exc:  # keep the error record machine-readable
        log.debug("unhandled error", exc_info=True)
        return _fail(args.command, "internal", exc)


def _fail(command, code, exc) -> int:
    record = {"error": {"command": command, "code": code, "type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return EXIT_CODES.get(code, 1)


if __name__ == "__main__":
    sys.exit(main())
