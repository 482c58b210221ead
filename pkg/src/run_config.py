"""Run configuration: a YAML document parsed into frozen dataclasses.

Example::

    sampler:
      latent_dim: 10
      total: 1000
      burnin: 800
      seed: 0
    entities:
      - name: users
        count: 943
        features: {path: users.csv, format: dense-csv}
      - name: movies
        count: 1682
    relations:
      - name: ratings
        entities: [users, movies]
        observations: ratings.txt
        alpha: 2.0
        holdout: 0.2
    options:
      repetitions: 10
      vary: seed

Relative paths resolve against the directory of the config file.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import yaml

from .config import DEFAULT_BURNIN, DEFAULT_THREADS, DEFAULT_TOTAL
from .errors import ConfigError
from .loaders import FEATURE_FORMATS
from .logger import get_logger

logger = get_logger(__name__)

VARY_MODES = ("seed", "split")
SOLVERS = ("direct", "cg")


@dataclass(frozen=True)
class FeatureSpec:
    path: Path
    format: str = "dense-csv"


@dataclass(frozen=True)
class EntitySpec:
    name: str
    count: int
    features: Optional[FeatureSpec] = None
    solver: Optional[str] = None


@dataclass(frozen=True)
class RelationSpec:
    """One relation of the run.

    Exactly one of ``test`` (a fixed test observation file) and ``holdout``
    (a random test fraction) may be given; with neither, nothing is evaluated.
    ``features_from_entities`` builds relation features by concatenating the
    entity features of each cell.
    """

    name: str
    entities: Tuple[str, ...]
    observations: Path
    alpha: float
    test: Optional[Path] = None
    holdout: Optional[float] = None
    features: Optional[FeatureSpec] = None
    test_features: Optional[FeatureSpec] = None
    features_from_entities: bool = False


@dataclass(frozen=True)
class SamplerSpec:
    latent_dim: int = 10
    total: int = DEFAULT_TOTAL
    burnin: int = DEFAULT_BURNIN
    seed: int = 0
    threads: int = DEFAULT_THREADS
    cg_tol: Optional[float] = None
    cg_maxiter: Optional[int] = None


@dataclass(frozen=True)
class HyperSpec:
    beta0: float = 2.0
    nu0: Optional[float] = None
    gamma_mu: float = 1.0
    gamma_nu: float = 1.0


@dataclass(frozen=True)
class Options:
    clamp: Optional[Tuple[float, float]] = None
    center_values: bool = False
    repetitions: int = 1
    vary: str = "seed"
    parallel_repetitions: bool = False
    output_dir: Path = Path("output")
    save_latents: bool = False


@dataclass(frozen=True)
class RunConfig:
    entities: Tuple[EntitySpec, ...]
    relations: Tuple[RelationSpec, ...]
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    hyper: HyperSpec = field(default_factory=HyperSpec)
    options: Options = field(default_factory=Options)

    def with_overrides(
        self,
        seed: Optional[int] = None,
        threads: Optional[int] = None,
        latent_dim: Optional[int] = None,
    ) -> "RunConfig":
        """Return a copy with command-line overrides applied."""
        changes: Dict[str, Any] = {}
        if seed is not None:
            if seed < 0:
                raise ConfigError("seed must be >= 0", "sampler.seed")
            changes["seed"] = seed
        if threads is not None:
            if threads < 1:
                raise ConfigError("threads must be >= 1", "sampler.threads")
            changes["threads"] = threads
        if latent_dim is not None:
            if latent_dim < 1:
                raise ConfigError("latent dimension must be >= 1", "sampler.latent_dim")
            changes["latent_dim"] = latent_dim
        return replace(self, sampler=replace(self.sampler, **changes))


def _check_keys(data: Mapping[str, Any], allowed: Tuple[str, ...], where: str) -> None:
    for key in data:
        if key not in allowed:
            path = f"{where}.{key}" if where else str(key)
            raise ConfigError(f"unknown key; expected one of {', '.join(allowed)}", path)


def _mapping(value: Any, where: str) -> Mapping[str, Any]:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError("expected a mapping", where)
    return value


def _number(value: Any, where: str, kind: type = float) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", where)
    if kind is int:
        if float(value) != int(value):
            raise ConfigError(f"expected an integer, got {value!r}", where)
        return int(value)
    return float(value)


def _path(value: Any, base_dir: Path, where: str) -> Path:
    if not isinstance(value, str) or not value:
        raise ConfigError("expected a file path", where)
    path = Path(value)
    return path if path.is_absolute() else base_dir / path


def _features(value: Any, base_dir: Path, where: str) -> Optional[FeatureSpec]:
    if value is None:
        return None
    if isinstance(value, str):
        return FeatureSpec(_path(value, base_dir, where))
    data = _mapping(value, where)
    _check_keys(data, ("path", "format"), where)
    fmt = data.get("format", "dense-csv")
    if fmt not in FEATURE_FORMATS:
        raise ConfigError(f"format must be one of {', '.join(FEATURE_FORMATS)}", f"{where}.format")
    return FeatureSpec(_path(data.get("path"), base_dir, f"{where}.path"), fmt)


def _entity(data: Any, base_dir: Path, where: str) -> EntitySpec:
    data = _mapping(data, where)
    _check_keys(data, ("name", "count", "features", "solver"), where)
    name = data.get("name")
    if not isinstance(name, str) or not name:
        raise ConfigError("entity name is required", f"{where}.name")
    if "count" not in data:
        raise ConfigError("instance count is required", f"{where}.count")
    count = _number(data["count"], f"{where}.count", int)
    if count < 1:
        raise ConfigError("count must be >= 1", f"{where}.count")
    solver = data.get("solver")
    if solver is not None and solver not in SOLVERS:
        raise ConfigError(f"solver must be one of {', '.join(SOLVERS)}", f"{where}.solver")
    return EntitySpec(name, count, _features(data.get("features"), base_dir, f"{where}.features"), solver)


def _relation(data: Any, base_dir: Path, where: str) -> RelationSpec:
    data = _mapping(data, where)
    _check_keys(
        data,
        (
            "name",
            "entities",
            "observations",
            "alpha",
            "test",
            "holdout",
            "features",
            "test_features",
            "features_from_entities",
        ),
        where,
    )
    name = data.get("name")
    if not isinstance(name, str) or not name:
        raise ConfigError("relation name is required", f"{where}.name")
    entities = data.get("entities")
    if not isinstance(entities, list) or len(entities) < 2:
        raise ConfigError("expected a list of at least two entity names", f"{where}.entities")
    if "alpha" not in data:
        raise ConfigError("alpha (observation precision) is required", f"{where}.alpha")
    alpha = _number(data["alpha"], f"{where}.alpha")
    if alpha <= 0:
        raise ConfigError("alpha must be > 0", f"{where}.alpha")

    holdout = data.get("holdout")
    if holdout is not None:
        holdout = _number(holdout, f"{where}.holdout")
        if not 0 < holdout < 1:
            raise ConfigError("holdout fraction must be in (0, 1)", f"{where}.holdout")
    if holdout is not None and data.get("test") is not None:
        raise ConfigError("give either test or holdout, not both", f"{where}.test")

    features = _features(data.get("features"), base_dir, f"{where}.features")
    from_entities = bool(data.get("features_from_entities", False))
    if features is not None and from_entities:
        raise ConfigError(
            "features and features_from_entities are exclusive",
            f"{where}.features_from_entities",
        )
    test_features = _features(data.get("test_features"), base_dir, f"{where}.test_features")
    if features is not None and data.get("test") is not None and test_features is None:
        raise ConfigError(
            "a fixed test file on a relation with features needs test_features",
            f"{where}.test_features",
        )

    return RelationSpec(
        name=name,
        entities=tuple(str(e) for e in entities),
        observations=_path(data.get("observations"), base_dir, f"{where}.observations"),
        alpha=alpha,
        test=None if data.get("test") is None else _path(data["test"], base_dir, f"{where}.test"),
        holdout=holdout,
        features=features,
        test_features=test_features,
        features_from_entities=from_entities,
    )


def _sampler(data: Mapping[str, Any]) -> SamplerSpec:
    allowed = ("latent_dim", "total", "burnin", "seed", "threads", "cg_tol", "cg_maxiter")
    _check_keys(data, allowed, "sampler")
    spec = SamplerSpec()
    values: Dict[str, Any] = {}
    for key in allowed:
        if key in data and data[key] is not None:
            kind = float if key == "cg_tol" else int
            values[key] = _number(data[key], f"sampler.{key}", kind)
    spec = replace(spec, **values)
    if spec.latent_dim < 1:
        raise ConfigError("latent dimension must be >= 1", "sampler.latent_dim")
    if spec.total < 1:
        raise ConfigError("total must be >= 1", "sampler.total")
    if not 0 <= spec.burnin < spec.total:
        raise ConfigError(
            f"burnin ({spec.burnin}) must be >= 0 and < total ({spec.total})",
            "sampler.burnin, sampler.total",
        )
    if spec.seed < 0:
        raise ConfigError("seed must be >= 0", "sampler.seed")
    if spec.threads < 1:
        raise ConfigError("threads must be >= 1", "sampler.threads")
    if spec.cg_tol is not None and spec.cg_tol <= 0:
        raise ConfigError("cg_tol must be > 0", "sampler.cg_tol")
    if spec.cg_maxiter is not None and spec.cg_maxiter < 1:
        raise ConfigError("cg_maxiter must be >= 1", "sampler.cg_maxiter")
    return spec


def _hyper(data: Mapping[str, Any]) -> HyperSpec:
    allowed = ("beta0", "nu0", "gamma_mu", "gamma_nu")
    _check_keys(data, allowed, "hyper")
    values = {k: _number(data[k], f"hyper.{k}") for k in allowed if data.get(k) is not None}
    for key, value in values.items():
        if value <= 0:
            raise ConfigError("must be > 0", f"hyper.{key}")
    return HyperSpec(**values)


def _options(data: Mapping[str, Any], base_dir: Path) -> Options:
    allowed = (
        "clamp",
        "center_values",
        "repetitions",
        "vary",
        "parallel_repetitions",
        "output_dir",
        "save_latents",
    )
    _check_keys(data, allowed, "options")
    clamp = data.get("clamp")
    if clamp is not None:
        if not isinstance(clamp, list) or len(clamp) != 2:
            raise ConfigError("expected [low, high]", "options.clamp")
        low, high = (_number(v, "options.clamp") for v in clamp)
        if low > high:
            raise ConfigError("low must be <= high", "options.clamp")
        clamp = (low, high)
    repetitions = _number(data.get("repetitions", 1), "options.repetitions", int)
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1", "options.repetitions")
    vary = data.get("vary", "seed")
    if vary not in VARY_MODES:
        raise ConfigError(f"vary must be one of {', '.join(VARY_MODES)}", "options.vary")
    output_dir = data.get("output_dir", "output")
    return Options(
        clamp=clamp,
        center_values=bool(data.get("center_values", False)),
        repetitions=repetitions,
        vary=vary,
        parallel_repetitions=bool(data.get("parallel_repetitions", False)),
        output_dir=_path(output_dir, base_dir, "options.output_dir"),
        save_latents=bool(data.get("save_latents", False)),
    )


def config_from_dict(data: Any, base_dir: Union[str, Path] = ".") -> RunConfig:
    """Validate a parsed YAML document and apply defaults.

    Raises:
        ConfigError: On unknown keys or violated constraints, naming the key path.
    """
    base_dir = Path(base_dir)
    data = _mapping(data, "")
    _check_keys(data, ("sampler", "hyper", "options", "entities", "relations"), "")

    entities_data = data.get("entities")
    if not isinstance(entities_data, list) or not entities_data:
        raise ConfigError("expected a non-empty list", "entities")
    relations_data = data.get("relations")
    if not isinstance(relations_data, list) or not relations_data:
        raise ConfigError("expected a non-empty list", "relations")

    entities = tuple(
        _entity(e, base_dir, f"entities[{i}]") for i, e in enumerate(entities_data)
    )
    names = [e.name for e in entities]
    for i, name in enumerate(names):
        if name in names[:i]:
            raise ConfigError(f"duplicate entity '{name}'", f"entities[{i}].name")

    relations: List[RelationSpec] = []
    for i, item in enumerate(relations_data):
        relation = _relation(item, base_dir, f"relations[{i}]")
        for entity in relation.entities:
            if entity not in names:
                raise ConfigError(f"unknown entity '{entity}'", f"relations[{i}].entities")
        if relation.name in (r.name for r in relations):
            raise ConfigError(f"duplicate relation '{relation.name}'", f"relations[{i}].name")
        relations.append(relation)

    return RunConfig(
        entities=entities,
        relations=tuple(relations),
        sampler=_sampler(_mapping(data.get("sampler"), "sampler")),
        hyper=_hyper(_mapping(data.get("hyper"), "hyper")),
        options=_options(_mapping(data.get("options"), "options"), base_dir),
    )


def parse_config(path: Union[str, Path]) -> RunConfig:
    """Load and validate a YAML run configuration.

    Raises:
        ConfigError: If the file is not valid YAML or fails validation.
        OSError: If the file cannot be read.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = yaml.safe_load(handle)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    config = config_from_dict(data, path.parent)
    logger.info(
        f"Loaded config {path}: {len(config.entities)} entities, "
        f"{len(config.relations)} relations, D={config.sampler.latent_dim}"
    )
    return config
