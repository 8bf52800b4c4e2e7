"""Command-line pipeline: ingest/synth -> train -> predict -> evaluate/interpret.

Every subcommand is deterministic given its inputs and the root seed;
all stage- and user-level randomness is derived from that one seed.
Output files are written atomically (temp file + rename). Timestamps
live only in run_meta.json so repeated runs produce byte-identical
artifacts everywhere else.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import evaluation as ev
from . import interpret as interp
from . import iohmm, pipeline, prediction, selection, synth
from .seeding import derive_seed
from .types import DataError, UserHistory, history_from_json, history_to_json

log = logging.getLogger("actmob")


@dataclasses.dataclass
class RunConfig:
    """All tunables, with config-file < command-line precedence."""

    trips: str | None = None
    calendar: str | None = None
    metadata: str | None = None
    corpus: str | None = None
    models: str | None = None
    predictions: str | None = None
    out: str = "out"
    seed: int = 0
    jobs: int = 1
    test_fraction: float = 0.2
    state_candidates: tuple[int, ...] = selection.DEFAULT_CANDIDATES
    fixed_states: int | None = None
    em_max_iter: int = 100
    em_tol: float = 1e-6
    em_restarts: int = 3
    ridge_logit: float = 1e-3
    ridge_duration: float = 1e-6
    sigma_min: float = 0.1
    mc_alpha: float = 1.0
    gibbs_samples: int = 1000
    top_k: int = 5
    top_k_start_locations: int = 10
    full_information: bool = False
    clamp_durations: bool = False
    lr_per_index: bool = False
    synth_users: int = 5
    synth_days: int = 60
    synth_stations: int = 6

    def em_config(self) -> iohmm.EMConfig:
        return iohmm.EMConfig(
            max_iter=self.em_max_iter, tol=self.em_tol, restarts=self.em_restarts,
            ridge_logit=self.ridge_logit, ridge_duration=self.ridge_duration,
            sigma_min=self.sigma_min,
        )

    def validate(self) -> None:
        if not (0.0 < self.test_fraction < 1.0):
            raise DataError("test_fraction must lie in (0, 1)")
        if self.jobs < 1 or self.em_restarts < 1 or self.em_max_iter < 1:
            raise DataError("jobs, em_restarts, and em_max_iter must be >= 1")
        if self.mc_alpha <= 0.0 or self.sigma_min <= 0.0:
            raise DataError("mc_alpha and sigma_min must be positive")
        if self.gibbs_samples < 1 or self.top_k < 1:
            raise DataError("gibbs_samples and top_k must be >= 1")
        if min(self.state_candidates, default=0) < 1:
            raise DataError("state candidates must be >= 1")


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """Build the config: defaults, then config file, then explicit flags."""
    values: dict = {}
    if path:
        with open(path) as fh:
            doc = json.load(fh)
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "state_candidates" in values:
        values["state_candidates"] = tuple(int(m) for m in values["state_candidates"])
    config = RunConfig(**values)
    config.validate()
    return config


# --- output helpers -------------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class _WarningCounter(logging.Handler):
    def __init__(self) -> None:
        super().__init__(level=logging.WARNING)
        self.count = 0

    def emit(self, record: logging.LogRecord) -> None:
        self.count += 1


def _write_run_meta(out: Path, command: str, started: float, warnings: int, config: RunConfig) -> None:
    meta = {
        "command": command,
        "started_unix": started,
        "finished_unix": time.time(),
        "warnings": warnings,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in dataclasses.asdict(config).items()},
    }
    _atomic_write(out / "run_meta.json", json.dumps(meta, indent=1, sort_keys=True))


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _load_corpus(corpus_dir: str) -> tuple[list[UserHistory], dict[str, dict[str, str]]]:
    paths = sorted(Path(corpus_dir).glob("user_*.json"))
    if not paths:
        raise DataError(f"no user_*.json corpus files under {corpus_dir}")
    histories, splits = [], {}
    for p in paths:
        hist, sp = history_from_json(p.read_text())
        histories.append(hist)
        splits[hist.user] = sp
    return histories, splits


def _split_history(
    history: UserHistory, splits: dict[str, str], config: RunConfig
) -> tuple[UserHistory, UserHistory]:
    """Train/test split, honoring corpus labels when present."""
    if splits:
        train_days = [d for d, s in splits.items() if s == "train"]
        test_days = [d for d, s in splits.items() if s == "test"]
        if train_days and test_days:
            return history.subset(train_days), history.subset(test_days)
    return pipeline.split_train_test(
        history, config.test_fraction, derive_seed(config.seed, "split", history.user)
    )


# --- subcommands ----------------------------------------------------------------

def cmd_ingest(config: RunConfig) -> int:
    if not config.trips:
        raise DataError("ingest needs --trips")
    out = Path(config.out)
    histories, splits, report = pipeline.ingest(
        config.trips, config.calendar, config.test_fraction, config.seed,
        config.top_k_start_locations,
    )
    for hist in histories:
        _atomic_write(out / "corpus" / f"user_{hist.user}.json",
                      history_to_json(hist, splits[hist.user]))
    _atomic_write(out / "ingest_report.json",
                  json.dumps(report.as_dict(), indent=1, sort_keys=True))
    log.info("ingested %d users, %d days, %d trips", report.n_users, report.n_days, report.n_trips)
    return 0


def cmd_synth(config: RunConfig) -> int:
    out = Path(config.out)
    scenario = synth.default_scenario(
        n_users=config.synth_users, days_per_user=config.synth_days,
        seed=derive_seed(config.seed, "synth"), n_stations=config.synth_stations,
    )
    result = synth.synthesize(scenario)
    for hist in result.histories:
        _atomic_write(out / "corpus" / f"user_{hist.user}.json", history_to_json(hist))
    labels = {
        f"{u}|{d}": list(map(int, lab)) for (u, d), lab in sorted(result.labels.items())
    }
    _atomic_write(out / "truth_labels.json", json.dumps(labels, indent=1, sort_keys=True))
    _atomic_write(out / "truth_model.json", iohmm.params_to_json(scenario.params))
    _atomic_write(out / "synth_report.json", json.dumps({
        "n_users": scenario.n_users,
        "days_per_user": scenario.days_per_user,
        "n_duration_resamples": result.n_duration_resamples,
        "n_truncated_days": result.n_truncated_days,
    }, indent=1, sort_keys=True))
    log.info("synthesized %d users x %d days", scenario.n_users, scenario.days_per_user)
    return 0


def cmd_select_states(config: RunConfig) -> int:
    if not config.corpus:
        raise DataError("select-states needs --corpus")
    out = Path(config.out)
    histories, splits = _load_corpus(config.corpus)
    for hist in histories:
        train, _ = _split_history(hist, splits.get(hist.user, {}), config)
        sel = selection.select_state_count(
            train, config.state_candidates, derive_seed(config.seed, "select", hist.user)
        )
        _atomic_write(out / "selection" / f"user_{hist.user}.json", sel.to_json())
    return 0


def _train_one(args) -> tuple[str, str]:
    hist, splits, config = args
    train, test = _split_history(hist, splits, config)
    if config.fixed_states is not None:
        n_states, sel_doc = config.fixed_states, None
    else:
        sel = selection.select_state_count(
            train, config.state_candidates, derive_seed(config.seed, "select", hist.user)
        )
        n_states, sel_doc = sel.chosen, json.loads(sel.to_json())
    params, report = iohmm.fit(
        train, n_states, config.em_config(), seed=derive_seed(config.seed, "fit", hist.user)
    )
    doc = iohmm.params_to_json(params, extra={
        "user": hist.user,
        "selection": sel_doc,
        "em_report": report.as_dict(),
        "test_days": sorted(test.day_ids()),
        "train_days": sorted(train.day_ids()),
    })
    return hist.user, doc


def cmd_train(config: RunConfig) -> int:
    if not config.corpus:
        raise DataError("train needs --corpus")
    out = Path(config.out)
    histories, splits = _load_corpus(config.corpus)
    tasks = [(h, splits.get(h.user, {}), config) for h in histories]
    results = _pmap(_train_one, tasks, config.jobs)
    for user, doc in sorted(results):
        _atomic_write(out / "models" / f"user_{user}.json", doc)
    log.info("trained %d user models", len(results))
    return 0


def _predict_user(
    hist: UserHistory,
    params: iohmm.IOHMMParams,
    test: UserHistory,
    train: UserHistory,
    config: RunConfig,
) -> tuple[list[ev.PredictionRow], list[ev.PredictionRow], dict, bl.MarkovChainBaseline, bl.LinearRegressionBaseline]:
    lr = bl.fit_lr(train)
    lr_by_index = bl.fit_lr_per_index(train) if config.lr_per_index else None
    mc = bl.fit_mc(train, config.mc_alpha)
    iohmm_rows, base_rows = [], []
    detail = {"user": hist.user, "days": []}
    for seq in test.sequences:
        preds = prediction.predict_sequence(
            seq, params, k=config.top_k, full_information=config.full_information
        )
        day_detail = {"day": seq.day, "steps": []}
        for t, (dur, loc) in enumerate(preds, start=1):
            act = seq.activities[t - 1]
            truth_idx = params.vocab.index_of(act.end_location)
            order = prediction.rank_locations(loc.location_probs)
            rank = int(np.where(order == truth_idx)[0][0]) + 1
            iohmm_rows.append(ev.PredictionRow(
                user=hist.user, day=seq.day, step=t,
                pred_duration=float(dur.duration), true_duration=act.duration,
                pred_location=loc.location, true_location=act.end_location,
                rank_of_truth=rank,
            ))
            day_detail["steps"].append({
                "step": t,
                "pred_duration_h": dur.duration,
                "pred_duration_clamped_h": dur.duration_clamped,
                "location_probs": {
                    s: float(p) for s, p in zip(params.vocab.stations, loc.location_probs)
                    if p >= 1e-12
                },
                "top_k": list(loc.top_k),
            })

            if lr_by_index is not None:
                lr_pred = lr_by_index.predict(t, seq.contexts[t - 1])
            else:
                lr_pred = bl.predict_lr(lr, seq.contexts[t - 1])
            prev = None if t == 1 else act.start_location
            mc_probs, _ = bl.predict_mc(mc, prev)
            mc_order = prediction.rank_locations(mc_probs)
            mc_rank = int(np.where(mc_order == truth_idx)[0][0]) + 1
            base_rows.append(ev.PredictionRow(
                user=hist.user, day=seq.day, step=t,
                pred_duration=lr_pred, true_duration=act.duration,
                pred_location=train.vocab.stations[int(mc_order[0])],
                true_location=act.end_location, rank_of_truth=mc_rank,
            ))
        detail["days"].append(day_detail)
    return iohmm_rows, base_rows, detail, mc, lr


def cmd_predict(config: RunConfig) -> int:
    if not config.corpus or not config.models:
        raise DataError("predict needs --corpus and --models")
    out = Path(config.out)
    histories, splits = _load_corpus(config.corpus)
    all_iohmm, all_base = [], []
    n_test_days = 0
    for hist in histories:
        model_path = Path(config.models) / f"user_{hist.user}.json"
        if not model_path.exists():
            raise DataError(f"no model for user {hist.user} under {config.models}")
        params, extra = iohmm.params_from_json(model_path.read_text())
        if "test_days" in extra:
            test_days = set(extra["test_days"])
            test = hist.subset([d for d in hist.day_ids() if d in test_days])
            train = hist.subset([d for d in hist.day_ids() if d not in test_days])
        else:
            train, test = _split_history(hist, splits.get(hist.user, {}), config)
        if test.n_days == 0:
            raise DataError(f"user {hist.user} has no test days")
        iohmm_rows, base_rows, detail, mc, lr = _predict_user(hist, params, test, train, config)
        all_iohmm.extend(iohmm_rows)
        all_base.extend(base_rows)
        n_test_days += test.n_days
        _atomic_write(out / "details" / f"user_{hist.user}.json",
                      json.dumps(detail, indent=1, sort_keys=True))
        _atomic_write(out / "baselines" / f"user_{hist.user}_mc.json", mc.to_json())
        _atomic_write(out / "baselines" / f"user_{hist.user}_lr.json",
                      json.dumps(lr.to_dict(), indent=1, sort_keys=True))
    out.mkdir(parents=True, exist_ok=True)
    ev.write_predictions_csv(out / "predictions_iohmm.csv", all_iohmm)
    ev.write_predictions_csv(out / "predictions_baseline.csv", all_base)
    log.info("predicted %d activities over %d test days", len(all_iohmm), n_test_days)
    return 0


def cmd_evaluate(config: RunConfig) -> int:
    if not config.corpus or not config.predictions:
        raise DataError("evaluate needs --corpus and --predictions")
    out = Path(config.out)
    histories, _ = _load_corpus(config.corpus)
    by_user = {h.user: h for h in histories}
    metadata = ev.read_metadata_csv(config.metadata) if config.metadata else None

    pred_files = sorted(Path(config.predictions).glob("predictions_*.csv"))
    if not pred_files:
        raise DataError(f"no predictions_*.csv under {config.predictions}")
    for path in pred_files:
        model_name = path.stem.replace("predictions_", "")
        rows = ev.read_predictions_csv(path)
        grouped: dict[str, list[ev.PredictionRow]] = {}
        for row in rows:
            grouped.setdefault(row.user, []).append(row)
        scores = [ev.score_user(grouped[u]) for u in sorted(grouped)]
        report = ev.aggregate_report(scores)
        _atomic_write(out / "reports" / f"{model_name}_aggregate.json",
                      json.dumps(report, indent=1, sort_keys=True))
        _atomic_write(out / "reports" / f"{model_name}_scores.json", json.dumps(
            [s.as_dict() for s in scores], indent=1, sort_keys=True))
        _write_hist_csv(out / "reports" / f"{model_name}_error_hist.csv", report["error_hist"])
        _write_cdf_csv(out / "reports" / f"{model_name}_rank_cdf.csv", report["rank_cdf"])

        scored_users = [u for u in sorted(grouped) if u in by_user]
        X, names = ev.build_covariate_matrix([by_user[u] for u in scored_users], metadata)
        for target, key in (("duration_r2", "r2"), ("location_accuracy", "accuracy")):
            y, rows_x = [], []
            for u, xrow in zip(scored_users, X):
                score = next(s for s in scores if s.user == u)
                val = score.r2["overall"] if key == "r2" else score.accuracy["overall"]
                if val is not None:
                    y.append(val)
                    rows_x.append(xrow)
            if len(y) >= len(names) + 2:
                reg = ev.predictability_regression(np.asarray(rows_x), np.asarray(y), names)
                _atomic_write(out / "reports" / f"{model_name}_predictability_{target}.json",
                              json.dumps(reg.as_dict(), indent=1, sort_keys=True))
            else:
                log.warning("skipping predictability regression for %s/%s: %d users < %d",
                            model_name, target, len(y), len(names) + 2)
    return 0


def _write_hist_csv(path: Path, hist: dict) -> None:
    lines = ["bin_start_h,bin_end_h,count,density"]
    for i, (c, d) in enumerate(zip(hist["counts"], hist["density"])):
        lo = i * hist["bin_hours"]
        hi = lo + hist["bin_hours"]
        label_hi = repr(hi) if i < len(hist["counts"]) - 1 else "inf"
        lines.append(f"{lo!r},{label_hi},{int(c)},{d!r}")
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_cdf_csv(path: Path, cdf: list[float]) -> None:
    lines = ["k,cumulative_probability"]
    lines.extend(f"{k},{v!r}" for k, v in enumerate(cdf, start=1))
    _atomic_write(path, "\n".join(lines) + "\n")


def cmd_interpret(config: RunConfig) -> int:
    if not config.corpus or not config.models:
        raise DataError("interpret needs --corpus and --models")
    out = Path(config.out)
    histories, splits = _load_corpus(config.corpus)
    for hist in histories:
        model_path = Path(config.models) / f"user_{hist.user}.json"
        if not model_path.exists():
            raise DataError(f"no model for user {hist.user} under {config.models}")
        params, extra = iohmm.params_from_json(model_path.read_text())
        if "train_days" in extra:
            source = hist.subset([d for d in hist.day_ids() if d in set(extra["train_days"])])
        else:
            source, _ = _split_history(hist, splits.get(hist.user, {}), config)
        samples = interp.gibbs_sample(
            source, params, config.gibbs_samples,
            seed=derive_seed(config.seed, "gibbs", hist.user),
        )
        report = interp.pattern_report(samples, source, truncate_durations=config.clamp_durations)
        _atomic_write(out / "patterns" / f"user_{hist.user}.json", report.to_json())
        table = interp.coefficient_table(params)
        _atomic_write(out / "coefficients" / f"user_{hist.user}.txt",
                      interp.format_coefficient_table(table) + "\n")
        _atomic_write(out / "coefficients" / f"user_{hist.user}.json",
                      json.dumps({str(k): v for k, v in table.items()}, indent=1, sort_keys=True))
    return 0


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actmob",
        description="Activity-based next-trip prediction pipeline",
    )
    parser.add_argument("--verbose", "-v", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("ingest", help="trip/calendar CSVs -> corpus JSON")
    common(p)
    p.add_argument("--trips")
    p.add_argument("--calendar")
    p.add_argument("--test-fraction", dest="test_fraction", type=float)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--users", dest="synth_users", type=int)
    p.add_argument("--days", dest="synth_days", type=int)
    p.add_argument("--stations", dest="synth_stations", type=int)

    p = sub.add_parser("select-states", help="silhouette state-count selection")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--candidates", dest="state_candidates",
                   type=lambda s: tuple(int(x) for x in s.split(",")))

    p = sub.add_parser("train", help="select state count and fit per user")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--states", dest="fixed_states", type=int)
    p.add_argument("--candidates", dest="state_candidates",
                   type=lambda s: tuple(int(x) for x in s.split(",")))
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--restarts", dest="em_restarts", type=int)
    p.add_argument("--max-iter", dest="em_max_iter", type=int)

    p = sub.add_parser("predict", help="write test-day predictions")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--models")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--mc-alpha", dest="mc_alpha", type=float)
    p.add_argument("--full-information", dest="full_information", action="store_const", const=True)
    p.add_argument("--lr-per-index", dest="lr_per_index", action="store_const", const=True)

    p = sub.add_parser("evaluate", help="score prediction files")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--predictions")
    p.add_argument("--metadata")

    p = sub.add_parser("interpret", help="pattern reports and coefficient tables")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--models")
    p.add_argument("--gibbs-samples", dest="gibbs_samples", type=int)
    p.add_argument("--clamp-durations", dest="clamp_durations", action="store_const", const=True)

    return parser


_COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "select-states": cmd_select_states,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "interpret": cmd_interpret,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else (
        logging.INFO if args.verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    counter = _WarningCounter()
    logging.getLogger().addHandler(counter)

    overrides = {
        k: v for k, v in vars(args).items()
        if k not in {"command", "config", "verbose"}
    }
    started = time.time()
    try:
        config = load_config(args.config, overrides)
        status = _COMMANDS[args.command](config)
    except (DataError, OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 1
    _write_run_meta(Path(config.out), args.command, started, counter.count, config)
    return status


if __name__ == "__main__":
    sys.exit(main())
