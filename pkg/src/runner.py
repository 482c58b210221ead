"""Batch runner and command-line entry point.

A run loads every observation and feature file once, then for each repetition
splits the data, builds and validates the model, runs the Gibbs chain while
folding test-cell predictions into accumulators, and writes one prediction CSV
per evaluated relation. ``report.json`` aggregates the test RMSE over
repetitions.

Usage::

    macau run experiment.yaml --threads 4
    macau validate experiment.yaml
    macau split ratings.txt 0.2 42 --degree 2 --out-dir splits
"""

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from .errors import (
    ConfigError,
    MacauError,
    ModelError,
    NumericalError,
    ParseError,
    ValidationFailedError,
)
from .loaders import load_features, load_observations, save_observations
from .logger import get_logger, set_level
from .model import (
    FeatureMatrix,
    HyperParams,
    Model,
    Observations,
    ValidationReport,
    concat_entity_features,
)
from .monitor import SamplerMonitor
from .numerics import RngStream
from .prediction import (
    PredictionAccumulator,
    PredictionQuery,
    accumulate,
    clamp_predictions,
    rmse,
    write_predictions,
)
from .run_config import FeatureSpec, RelationSpec, RunConfig, parse_config
from .sampler import MacauSampler, SamplerConfig, SamplerState

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4

# keys of the per-repetition seed derivation
SEED_SPLIT = 0
SEED_CHAIN = 1


class Split(NamedTuple):
    """Disjoint train/test partition and the source rows of each part."""

    train: Observations
    test: Observations
    train_rows: np.ndarray
    test_rows: np.ndarray


def split_holdout(
    observations: Observations, fraction: float, rng: np.random.Generator
) -> Split:
    """Randomly hold out ``round(fraction * n)`` observations as the test set.

    Both parts keep the original row order.

    Raises:
        ModelError: If ``fraction`` is outside (0, 1) or either part would be empty.
    """
    if not 0 < fraction < 1:
        raise ModelError(f"holdout fraction must be in (0, 1), got {fraction}")
    n = len(observations)
    n_test = int(round(fraction * n))
    if n < 2 or n_test < 1 or n_test >= n:
        raise ModelError(
            f"cannot hold out fraction {fraction} of {n} observations "
            f"({n_test} test cells); both parts must be non-empty"
        )
    order = rng.permutation(n)
    test_rows = np.sort(order[:n_test])
    train_rows = np.sort(order[n_test:])
    return Split(
        observations.subset(train_rows),
        observations.subset(test_rows),
        train_rows,
        test_rows,
    )


@dataclass
class RepetitionResult:
    """Outcome of one repetition.

    Attributes:
        repetition: 0-based repetition number.
        seed: Seed of the Gibbs chain.
        rmse: Test RMSE per evaluated relation.
        summary: PosteriorSummary of the chain as a dict.
        predictions: Prediction CSV per evaluated relation.
    """

    repetition: int
    seed: int
    rmse: Dict[str, float]
    summary: Dict[str, Any]
    predictions: Dict[str, str] = field(default_factory=dict)


@dataclass
class RunReport:
    """Test RMSE over repetitions plus chain diagnostics."""

    repetitions: List[RepetitionResult]

    @property
    def relations(self) -> List[str]:
        names: List[str] = []
        for result in self.repetitions:
            names.extend(n for n in result.rmse if n not in names)
        return names

    def rmse_values(self, relation: str) -> List[float]:
        return [r.rmse[relation] for r in self.repetitions if relation in r.rmse]

    def mean_rmse(self, relation: str) -> Optional[float]:
        values = self.rmse_values(relation)
        return float(np.mean(values)) if values else None

    def std_rmse(self, relation: str) -> Optional[float]:
        """Sample standard deviation; ``None`` with fewer than two repetitions."""
        values = self.rmse_values(relation)
        return float(np.std(values, ddof=1)) if len(values) > 1 else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "repetitions": [asdict(r) for r in self.repetitions],
            "rmse": {
                name: {
                    "values": self.rmse_values(name),
                    "mean": self.mean_rmse(name),
                    "std": self.std_rmse(name),
                }
                for name in self.relations
            },
        }

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
        logger.info(f"Wrote run report to {path}")


@dataclass
class RelationData:
    """Files of one relation, loaded once per run."""

    spec: RelationSpec
    observations: Observations
    features: Optional[FeatureMatrix] = None
    test: Optional[Observations] = None
    test_features: Optional[FeatureMatrix] = None


def _load_feature_spec(spec: Optional[FeatureSpec]) -> Optional[FeatureMatrix]:
    return None if spec is None else load_features(spec.path, spec.format)


def _rows(matrix: Optional[FeatureMatrix], rows: np.ndarray) -> Optional[FeatureMatrix]:
    return None if matrix is None else matrix[rows]


class ExperimentRunner:
    """Runs the repetitions of one RunConfig.

    Attributes:
        _config (RunConfig): Validated run configuration.
        _base (RngStream): Stream all split and chain seeds derive from.
        _entity_features (Dict[str, Optional[FeatureMatrix]]): Loaded entity features.
        _relations (List[RelationData]): Loaded relation files.
    """

    _config: RunConfig
    _base: RngStream
    _entity_features: Dict[str, Optional[FeatureMatrix]]
    _relations: List[RelationData]

    def __init__(self, config: RunConfig) -> None:
        self._config = config
        self._base = RngStream(config.sampler.seed)
        self._entity_features = {}
        self._relations = []

    def load_data(self) -> None:
        """Read every observation and feature file named by the config.

        Raises:
            ParseError: On a malformed file.
            OSError: On an unreadable file.
        """
        self._entity_features = {
            e.name: _load_feature_spec(e.features) for e in self._config.entities
        }
        self._relations = []
        for spec in self._config.relations:
            degree = len(spec.entities)
            data = RelationData(spec, load_observations(spec.observations, degree))
            data.features = _load_feature_spec(spec.features)
            if data.features is not None and data.features.shape[0] != len(data.observations):
                raise ParseError(
                    f"{data.features.shape[0]} feature rows for "
                    f"{len(data.observations)} observations",
                    str(spec.features.path if spec.features else ""),
                )
            if spec.test is not None:
                data.test = load_observations(spec.test, degree)
                data.test_features = _load_feature_spec(spec.test_features)
            self._relations.append(data)

    def _hyper(self) -> HyperParams:
        spec = self._config.hyper
        return HyperParams(
            latent_dim=self._config.sampler.latent_dim,
            beta0=spec.beta0,
            nu0=spec.nu0,
            gamma_mu=spec.gamma_mu,
            gamma_nu=spec.gamma_nu,
        )

    def _split_stream(self, repetition: int) -> RngStream:
        key = repetition if self._config.options.vary == "split" else 0
        return self._base.derive(SEED_SPLIT, key)

    def chain_seed(self, repetition: int) -> int:
        return self._base.derive(SEED_CHAIN, repetition).seed

    def build_model(self, repetition: int = 0) -> Tuple[Model, List[PredictionQuery]]:
        """Build the training model and test queries of one repetition.

        Test cells never enter the training relation: holdout cells are removed
        by the split, and cells of a fixed test file that also appear in the
        observation file are dropped from training with a warning.
        """
        if not self._relations:
            self.load_data()
        model = Model(self._hyper())
        for spec in self._config.entities:
            model.add_entity(spec.name, spec.count, self._entity_features[spec.name], spec.solver)

        splits = self._split_stream(repetition)
        queries: List[PredictionQuery] = []
        for pos, data in enumerate(self._relations):
            spec = data.spec
            train, train_features = data.observations, data.features
            test, test_features = data.test, data.test_features
            if spec.holdout is not None:
                split = split_holdout(data.observations, spec.holdout, splits.generator(pos))
                train, test = split.train, split.test
                train_features = _rows(data.features, split.train_rows)
                test_features = _rows(data.features, split.test_rows)
            elif test is not None:
                keep = self._not_in(train, test)
                if not keep.all():
                    logger.warning(
                        f"Relation {spec.name}: dropping {int((~keep).sum())} training "
                        f"cells that also appear in the test file"
                    )
                    train = train.subset(np.flatnonzero(keep))
                    train_features = _rows(train_features, np.flatnonzero(keep))

            entities = [model.entity(e) for e in spec.entities]
            if spec.features_from_entities:
                train_features = concat_entity_features(entities, train.indices)
                if test is not None:
                    test_features = concat_entity_features(entities, test.indices)

            offset = float(train.values.mean()) if self._config.options.center_values and len(train) else 0.0
            relation = model.add_relation(
                spec.name, spec.entities, train, spec.alpha, train_features, offset
            )
            if test is not None and len(test):
                queries.append(PredictionQuery.from_observations(relation, test, test_features))
        return model, queries

    @staticmethod
    def _not_in(train: Observations, test: Observations) -> np.ndarray:
        """Mask of training rows whose index vector is absent from ``test``."""
        test_cells = {tuple(row) for row in test.indices.tolist()}
        return np.array([tuple(row) not in test_cells for row in train.indices.tolist()], dtype=bool)

    def validate(self) -> ValidationReport:
        model, _ = self.build_model(0)
        return model.validate()

    def _sampler_config(self) -> SamplerConfig:
        spec = self._config.sampler
        extra: Dict[str, Any] = {}
        if spec.cg_tol is not None:
            extra["cg_tol"] = spec.cg_tol
        solvers = {e.name: e.solver for e in self._config.entities if e.solver is not None}
        return SamplerConfig(
            total=spec.total,
            burnin=spec.burnin,
            threads=spec.threads,
            cg_maxiter=spec.cg_maxiter,
            solvers=solvers,
            **extra,
        )

    def run_repetition(self, repetition: int) -> RepetitionResult:
        """Run one chain and write its prediction files.

        Raises:
            ValidationFailedError: If the model is not factorizable.
            NumericalError: If the chain hits a numerical failure.
        """
        options = self._config.options
        seed = self.chain_seed(repetition)
        logger.info(f"Repetition {repetition + 1}/{options.repetitions} (chain seed {seed})")
        model, queries = self.build_model(repetition)
        report = model.validate()
        if not report.ok:
            raise ValidationFailedError(report)

        accumulators = [PredictionAccumulator.empty(len(q)) for q in queries]

        def sink(state: SamplerState) -> None:
            for acc, query in zip(accumulators, queries):
                accumulate(acc, state, query)

        sampler = MacauSampler(model, self._sampler_config(), SamplerMonitor())
        summary = sampler.run(RngStream(seed), sink)

        output_dir = Path(options.output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        result = RepetitionResult(repetition, seed, {}, summary.to_dict())
        for acc, query in zip(accumulators, queries):
            name = query.relation.name
            mean = acc.mean if options.clamp is None else clamp_predictions(acc.mean, *options.clamp)
            if query.truth is not None:
                result.rmse[name] = rmse(mean, query.truth)
                logger.info(f"Repetition {repetition + 1}: test RMSE {name} = {result.rmse[name]:.5f}")
            path = output_dir / f"predictions_{name}_rep{repetition}.csv"
            write_predictions(path, query, acc, options.clamp)
            result.predictions[name] = str(path)
        if options.save_latents:
            path = output_dir / f"latents_rep{repetition}.npz"
            np.savez(path, **sampler.latent_means)
            logger.info(f"Saved posterior-mean latents to {path}")
        return result

    def run(self) -> RunReport:
        """Run every repetition and write ``report.json`` to the output directory."""
        self.load_data()
        options = self._config.options
        reps = range(options.repetitions)
        if options.parallel_repetitions and options.repetitions > 1:
            results = Parallel(n_jobs=options.repetitions)(
                delayed(self.run_repetition)(r) for r in reps
            )
        else:
            results = [self.run_repetition(r) for r in reps]
        report = RunReport(list(results))
        Path(options.output_dir).mkdir(parents=True, exist_ok=True)
        report.write(Path(options.output_dir) / "report.json")
        for name in report.relations:
            std = report.std_rmse(name)
            logger.info(
                f"Relation {name}: mean test RMSE {report.mean_rmse(name):.5f}"
                + (f" +- {std:.5f}" if std is not None else "")
                + f" over {len(report.rmse_values(name))} repetitions"
            )
        return report


def run(config: RunConfig) -> RunReport:
    return ExperimentRunner(config).run()


def _split_command(args: argparse.Namespace) -> None:
    observations = load_observations(args.obs_file, args.degree)
    split = split_holdout(observations, args.fraction, RngStream(args.seed).generator(SEED_SPLIT))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.obs_file).stem
    save_observations(out_dir / f"{stem}_train.txt", split.train)
    save_observations(out_dir / f"{stem}_test.txt", split.test)
    logger.info(
        f"Split {len(observations)} observations into {len(split.train)} train and "
        f"{len(split.test)} test cells in {out_dir}"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macau", description="Bayesian factorization with side information")
    parser.add_argument("--threads", type=int, help="worker threads (overrides config)")
    parser.add_argument("--seed", type=int, help="random seed (overrides config)")
    parser.add_argument("--latent-dim", type=int, help="latent dimension D (overrides config)")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="sample and evaluate a configured experiment")
    run_parser.add_argument("config")
    validate_parser = commands.add_parser("validate", help="check that the configured model is factorizable")
    validate_parser.add_argument("config")

    split_parser = commands.add_parser("split", help="write a random train/test split of an observation file")
    split_parser.add_argument("obs_file")
    split_parser.add_argument("fraction", type=float)
    split_parser.add_argument("seed", type=int)
    split_parser.add_argument("--degree", type=int, default=2)
    split_parser.add_argument("--out-dir", default=".")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Command-line entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    if args.log_level:
        set_level(args.log_level)
    try:
        if args.command == "split":
            _split_command(args)
            return EXIT_OK
        config = parse_config(args.config).with_overrides(args.seed, args.threads, args.latent_dim)
        runner = ExperimentRunner(config)
        if args.command == "validate":
            report = runner.validate()
            if not report.ok:
                raise ValidationFailedError(report)
            logger.info("Model is factorizable")
            return EXIT_OK
        runner.run()
        return EXIT_OK
    except ValidationFailedError as exc:
        logger.error(f"Validation failed: {exc}")
        return EXIT_VALIDATION
    except NumericalError as exc:
        logger.error(f"Numerical failure: {exc}")
        return EXIT_NUMERIC
    except (ConfigError, ModelError, OSError) as exc:
        logger.error(f"Error: {exc}")
        return EXIT_CONFIG
    except MacauError as exc:  # pragma: no cover
        logger.error(f"Run aborted: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
