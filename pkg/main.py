"""
Macrostate Toolkit - Main Application

Batch front door for causal feature learning on tabular micro-data:
- pipeline: bin the outcome, estimate P(bin | covariates), cluster into macrostates,
  profile them and run the downstream regressions
- bin-sweep: minimum treated share per cluster across bin counts
- verify-cct: Monte Carlo check that causal partitions coarsen observational ones
- match: propensity score matching, balance and bootstrapped ATE
- regularity-audit: epsilon-regularity of macrostate partitions
"""
import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

import plots
from binning import assign_bins, make_bins
from clustering import Partition, cluster_profile, kmeans_fit, min_treated_fraction, objective_table
from config import EXACT_MAX_CELL, RunConfig, load_run_config
from data_model import Dataset, load_csv
from data_processor import DataProcessor
from density import SoftmaxClassifierConfig, fit_frequency_table, fit_softmax_classifier, predict_cond_dist
from errors import ConfigError, StageError, ToolkitError
from inference import (
    ate_bootstrap,
    balance_report,
    cluster_indicator_regression,
    default_caliper,
    distribution_heterogeneity,
    heterogeneity_flags,
    heterogeneity_regression,
    nn_match,
    propensity_fit,
    require_both_arms,
)
from regularity import WeightedBipartiteGraph, partition_regularity_report, quasi_randomness
from scm_oracle import (
    SyntheticSCM,
    cct_monte_carlo,
    observational_partition,
    validate_cct_report,
)
from ui import ToolkitUI, configure_logging

logger = logging.getLogger(__name__)

COMMANDS = ("pipeline", "bin-sweep", "verify-cct", "match", "regularity-audit")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INTERRUPTED = 130


class MacrostateToolkit:
    """Main application class orchestrating the stages of one command"""

    def __init__(self, config: RunConfig, command: str, ui: Optional[ToolkitUI] = None):
        self.config = config
        self.command = command
        self.ui = ui or ToolkitUI()
        self.data_processor = DataProcessor(config.out_dir, config.to_dict(), command)

    @contextmanager
    def stage(self, name: str):
        """Run a block as a named stage; any failure surfaces as StageError(name, cause)"""
        self.ui.show_processing_step(name)
        try:
            yield
        except (KeyboardInterrupt, StageError):
            raise
        except Exception as e:
            raise StageError(name, e) from e

    # Shared stages

    def load_dataset(self) -> Dataset:
        with self.stage("load"):
            if not self.config.input:
                raise ConfigError("this command needs an input CSV ('input' in the config)")
            d = load_csv(self.config.input, self.config.roles, self.config.differences)
            self.ui.display_success(f"Loaded {d.n} rows ({d.dropped_rows} dropped)")
        return d

    def _bin(self, d: Dataset, m: int):
        outcome = d.outcome
        if outcome is None:
            raise ConfigError("binning needs exactly one outcome column")
        y = d.column(outcome)
        edges = make_bins(y, m, self.config.binning.scheme)
        return edges, assign_bins(y, edges, clamp=self.config.binning.clamp)

    def _fit(self, d: Dataset, labels):
        features = d.feature_columns(include_treatment=self.config.include_treatment)
        settings = self.config.density
        if settings.estimator == "frequency":
            return fit_frequency_table(d, labels, features)
        overrides = {
            "learning_rate": settings.learning_rate,
            "epochs": settings.epochs,
            "batch_size": settings.batch_size,
            "l2_penalty": settings.l2_penalty,
        }
        if settings.hidden_layers is not None:
            overrides["hidden_layers"] = tuple(settings.hidden_layers)
        cfg = SoftmaxClassifierConfig.default_for(len(features), self.config.seed, **overrides)
        return fit_softmax_classifier(d, labels, cfg, features)

    def _cluster(self, cond, K: int) -> Partition:
        return kmeans_fit(cond, K, self.config.seed, self.config.clustering.restarts, self.config.threads)

    # Commands

    def run_pipeline(self, d: Optional[Dataset] = None, prefix: str = "") -> Dict[str, Any]:
        """bin -> fit -> predict -> cluster -> profile -> inference"""
        out = self.data_processor
        d = d if d is not None else self.load_dataset()

        with self.stage(f"{prefix}bin"):
            edges, labels = self._bin(d, self.config.binning.m)
            out.write_json("bin", f"{prefix}bins.json", {**edges.to_dict(), "occupancy": labels.counts()})
            out.write_csv("bin", f"{prefix}bin_labels.csv", pd.DataFrame({"row": np.arange(d.n), "bin": labels.values}))
            self.ui.display_info(f"{edges.m} bin(s) realized of {edges.requested_m} requested")

        with self.stage(f"{prefix}fit"):
            estimator = self._fit(d, labels)
            out.write_json("fit", f"{prefix}estimator.json", estimator.to_dict())

        with self.stage(f"{prefix}predict"):
            cond = predict_cond_dist(estimator, d)
            out.write_csv("predict", f"{prefix}cond_dist.csv", cond.to_frame())

        partitions: Dict[int, Partition] = {}
        with self.stage(f"{prefix}cluster"):
            for K in self.config.K:
                p = self._cluster(cond, K)
                partitions[K] = p
                out.write_csv("cluster", f"{prefix}partition_K{K}.csv", p.to_frame())
                out.write_json("cluster", f"{prefix}partition_K{K}.json", p.to_dict())
            if len(self.config.K) > 1:
                table = objective_table(
                    cond, self.config.K, self.config.seed, self.config.clustering.restarts, self.config.threads
                )
                out.write_csv("cluster", f"{prefix}objective_table.csv", table)
                self.ui.display_frame(table, "Within-cluster sum of squares by K")

        with self.stage(f"{prefix}profile"):
            for K, p in partitions.items():
                self._write_profile(d, p, K, prefix)

        # [inference].treatments can stand in for a single treatment-role column
        if d.outcome is not None and (d.treatment is not None or self.config.inference.treatments):
            with self.stage(f"{prefix}inference"):
                for K, p in partitions.items():
                    self._write_inference(d, p, labels, K, prefix)

        return {"dataset": d, "edges": edges, "labels": labels, "estimator": estimator,
                "cond": cond, "partitions": partitions}

    def _write_profile(self, d: Dataset, p: Partition, K: int, prefix: str):
        out = self.data_processor
        settings = self.config.profile
        profile = cluster_profile(d, p, settings.covariates)
        payload = profile.to_dict()
        if d.treatment is not None:
            payload["min_treated_fraction"] = min_treated_fraction(d, p)
        out.write_json("profile", f"{prefix}profiles_K{K}.json", payload)
        out.write_csv("profile", f"{prefix}profiles_K{K}.csv", profile.to_frame())
        self.ui.display_profile(profile.to_frame(), payload["global_means"])

        provenance = out.provenance()
        out.write_svg("profile", f"{prefix}profile_bars_K{K}.svg", plots.profile_bars(profile, provenance))
        column = settings.histogram_column or (d.covariates[0] if d.covariates else None)
        treat = d.column(d.treatment) if d.treatment is not None else None
        if column is not None:
            svg = plots.histogram_by_cluster(
                d.column(column), p.labels, treat, column, settings.histogram_bins, provenance
            )
            out.write_svg("profile", f"{prefix}histogram_{column}_K{K}.svg", svg)
        if treat is not None:
            out.write_svg("profile", f"{prefix}treatment_counts_K{K}.svg",
                          plots.treatment_counts(p.labels, treat, provenance))

    def _write_inference(self, d: Dataset, p: Partition, labels, K: int, prefix: str):
        out = self.data_processor
        settings = self.config.inference

        if settings.moderator:
            result = heterogeneity_regression(d, settings.moderator, settings.robust)
            out.write_json("inference", f"{prefix}interaction_ols.json", result.to_dict())
            out.write_csv("inference", f"{prefix}interaction_ols.csv", result.to_frame())
            self.ui.display_ols(result, "Interaction regression")

        result = cluster_indicator_regression(d, p, settings.treatments or None, settings.robust)
        out.write_json("inference", f"{prefix}cluster_ols_K{K}.json", result.to_dict())
        out.write_csv("inference", f"{prefix}cluster_ols_K{K}.csv", result.bracket_table())
        self.ui.display_ols(result, f"Cluster-indicator regression (K={K})")

        if settings.strata:
            flags = heterogeneity_flags(d, p, settings.strata, settings.randomized)
            out.write_json("inference", f"{prefix}heterogeneity_K{K}.json", flags.to_dict())
            dist = distribution_heterogeneity(d, labels, settings.strata, settings.distribution_tol, settings.randomized)
            out.write_json("inference", f"{prefix}distribution_heterogeneity.json", dist.to_dict())
            verdict = "heterogeneous" if flags.heterogeneous else "no heterogeneity flagged"
            self.ui.display_info(f"K={K}: {verdict} ({flags.label})")

    def run_bin_sweep(self):
        d = self.load_dataset()
        bins = self.config.sweep.bins
        if not bins:
            raise StageError("bin-sweep", ConfigError("[sweep].bins must list at least one bin count"))
        if d.treatment is None:
            raise StageError("bin-sweep", ConfigError("bin-sweep needs a treatment column"))

        rows: List[Dict[str, Any]] = []
        with self.ui.display_progress("Sweeping bin counts") as progress:
            task = progress.add_task("Sweeping bin counts...", total=len(bins))
            for m in bins:
                try:
                    edges, labels = self._bin(d, m)
                    cond = predict_cond_dist(self._fit(d, labels), d)
                    p = self._cluster(cond, self.config.sweep.K)
                    rows.append({"bins": m, "realized_m": edges.m, "min_treated": min_treated_fraction(d, p)})
                except Exception as e:
                    raise StageError(f"bin-sweep m={m}", e) from e
                progress.update(task, advance=1)

        table = pd.DataFrame(rows, columns=["bins", "realized_m", "min_treated"])
        self.data_processor.write_csv("bin-sweep", "bin_sweep.csv", table)
        self.data_processor.write_json("bin-sweep", "bin_sweep.json", {"K": self.config.sweep.K, "rows": rows})
        self.ui.display_frame(table, "Minimum treated share per cluster by bin count")

    def run_verify_cct(self):
        settings = self.config.cct
        with self.stage("verify-cct"):
            report = cct_monte_carlo(
                settings.trials, settings.dims, self.config.seed, settings.tol,
                settings.side, settings.family, self.config.threads,
            )
            payload = report.to_dict()
            validate_cct_report(payload)
            self.data_processor.write_json("verify-cct", "cct_report.json", payload)
        self.ui.display_key_values(payload, "Coarsening Monte Carlo")
        if report.violations:
            self.ui.display_warning(f"{report.violations} non-degenerate violation(s) found")

    def run_match(self):
        out = self.data_processor
        settings = self.config.match
        d = self.load_dataset()

        with self.stage("propensity"):
            treatment, _ = d.require_inference_roles()
            t = d.column(treatment)
            require_both_arms(t)
            model = propensity_fit(d, settings.covariates)
            out.write_json("propensity", "propensity.json", model.to_dict())
            out.write_svg("propensity", "propensity_distribution.svg",
                          plots.propensity_distribution(model.scores, t, provenance=out.provenance()))

        with self.stage("match"):
            caliper = settings.caliper
            if caliper is None:
                caliper = default_caliper(model.logits, settings.caliper_width)
            # matching runs on the logit scale, where the caliper is measured
            matches = nn_match(model.logits, t, caliper)
            out.write_csv("match", "matches.csv", matches.to_frame())
            out.write_json("match", "matches.json", matches.to_dict())
            self.ui.display_info(f"{len(matches.pairs)} pair(s), {len(matches.unmatched_treated)} treated unmatched")

        with self.stage("balance"):
            balance = balance_report(d, matches, settings.covariates)
            frame = balance.to_frame()
            out.write_csv("balance", "balance.csv", frame)
            out.write_svg("balance", "love_plot.svg", plots.love_plot(frame, provenance=out.provenance()))
            self.ui.display_frame(frame, "Standardized mean differences")
            out.summary["max_smd_before"] = balance.max_smd_before
            out.summary["max_smd_after"] = balance.max_smd_after

        with self.stage("ate"):
            estimate = ate_bootstrap(d, matches, B=settings.bootstrap, seed=self.config.seed, n_jobs=self.config.threads)
            out.write_json("ate", "ate.json", estimate.to_dict())
            out.summary["ate"] = estimate.ate
            out.summary["ate_se"] = estimate.se
            self.ui.display_key_values(estimate.to_dict(), "Matched ATE")

        if settings.chain_pipeline:
            self.ui.display_info("Running the pipeline on the matched pseudo-population")
            self.run_pipeline(d.subset(matches.matched_rows()), prefix="pseudo_")

    def run_regularity_audit(self):
        settings = self.config.regularity
        if settings.source == "scm":
            with self.stage("load-scm"):
                if not settings.scm:
                    raise ConfigError("[regularity].scm must name an SCM JSON file")
                scm_path = Path(settings.scm)
                if not scm_path.exists():
                    raise FileNotFoundError(f"SCM file not found: {settings.scm}")
                scm = SyntheticSCM.from_dict(json.loads(scm_path.read_text(encoding="utf-8")))
                graph = WeightedBipartiteGraph.from_scm(scm)
                px = observational_partition(scm).labels
                py = observational_partition(scm, side="y").labels
        else:
            results = self.run_pipeline()
            K = self.config.K[0]
            graph = WeightedBipartiteGraph.from_cond_dist(results["cond"])
            px = results["partitions"][K].labels
            m = graph.n_right
            py = np.concatenate([
                np.full(len(chunk), i) for i, chunk in enumerate(np.array_split(np.arange(m), min(settings.y_cells, m)))
            ])

        with self.stage("regularity"):
            report = partition_regularity_report(
                graph, px, py, settings.eps, settings.mode, settings.sampled_fallback,
                settings.samples, self.config.seed, self.config.threads,
            )
            payload = report.to_dict()
            small = max(graph.n_left, graph.n_right) <= EXACT_MAX_CELL
            if 0 < settings.eps < 1 and graph.weights.sum() > 0:
                qr = quasi_randomness(graph, settings.eps, "exact" if small else "sampled",
                                      settings.samples, self.config.seed)
                payload["quasi_randomness"] = qr.to_dict()
            self.data_processor.write_json("regularity", "regularity_report.json", payload)
        self.ui.display_key_values(
            {k: payload[k] for k in ("eps", "total_pairs", "irregular_pairs", "allowed_irregular",
                                     "partition_regular", "one_sided")},
            "Regularity audit",
        )

    def run(self) -> None:
        """Dispatch the configured command"""
        self.ui.display_welcome(self.command)
        handlers = {
            "pipeline": self.run_pipeline,
            "bin-sweep": self.run_bin_sweep,
            "verify-cct": self.run_verify_cct,
            "match": self.run_match,
            "regularity-audit": self.run_regularity_audit,
        }
        handlers[self.command]()
        self.ui.display_artifacts(self.data_processor.artifacts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macrostate", description="Causal feature learning toolkit")
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out-dir", dest="out_dir", help="output directory (default: $CFL_OUT_DIR or ./output)")
    parser.add_argument("--threads", type=int, help="worker count for parallel stages")
    parser.add_argument("--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pipeline", help="bin, fit, cluster, profile and analyse")
    sub.add_parser("bin-sweep", help="minimum treated share per cluster across bin counts")
    cct = sub.add_parser("verify-cct", help="coarsening Monte Carlo on random SCMs")
    cct.add_argument("--trials", type=int)
    cct.add_argument("--dims", type=int, nargs=3, metavar=("Z", "X", "M"))
    sub.add_parser("match", help="propensity score matching and bootstrapped ATE")
    sub.add_parser("regularity-audit", help="epsilon-regularity of macrostate partitions")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {"seed": args.seed, "out_dir": args.out_dir, "threads": args.threads}
    config = load_run_config(args.config, overrides)
    if args.command == "verify-cct":
        cct = config.cct
        if getattr(args, "trials", None) is not None:
            cct = replace(cct, trials=args.trials)
        if getattr(args, "dims", None) is not None:
            cct = replace(cct, dims=tuple(args.dims))
        config = replace(config, cct=cct)
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point for the Macrostate Toolkit"""
    load_dotenv()
    args = build_parser().parse_args(argv)
    ui = ToolkitUI()
    configure_logging(args.verbose, ui.console)

    try:
        config = resolve_config(args)
    except (ToolkitError, FileNotFoundError) as e:
        ui.display_error(str(e))
        return EXIT_FAILED

    app = MacrostateToolkit(config, args.command, ui)
    started = time.perf_counter()
    try:
        app.run()
    except KeyboardInterrupt:
        ui.display_warning("Operation cancelled by user")
        app.data_processor.write_manifest(status="interrupted")
        return EXIT_INTERRUPTED
    except StageError as e:
        ui.display_error(str(e))
        logger.debug("stage failure", exc_info=e.cause)
        app.data_processor.write_manifest(status="failed", failed_stage=e.stage)
        return EXIT_FAILED
    finally:
        elapsed = time.perf_counter() - started
        app.data_processor.write_wall_time(elapsed)

    app.data_processor.write_manifest()
    ui.display_success(f"{args.command} completed in {elapsed:.1f}s; artifacts in {config.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
