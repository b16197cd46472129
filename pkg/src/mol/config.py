"""Experiment configuration: strict JSON with one section per library module.

Every field has a default, so ``{}`` is a valid file. Unknown sections or
keys raise :class:`ConfigError` listing all offenders at once.
"""
import json
from dataclasses import asdict, dataclass, field, fields

from .exceptions import ConfigError, ParameterError
from .network import NetworkConfig
from .solver import SolverConfig
from .training import TrainConfig

__all__ = [
    "DatasetSection",
    "OperatorSection",
    "NetworkSection",
    "SolverSection",
    "TrainingSection",
    "AnalysisSection",
    "ExperimentConfig",
    "load_config",
    "parse_config",
]


@dataclass
class DatasetSection:
    count: int = 200
    shape: list = field(default_factory=lambda: [32, 32])
    noise_sigma: float = 0.01
    split_fractions: list = field(default_factory=lambda: [0.7, 0.15, 0.15])
    min_shapes: int = 3
    max_shapes: int = 7


@dataclass
class OperatorSection:
    acceleration: float = 4.0
    density_decay: float = 2.0
    n_coils: int = 1


@dataclass
class NetworkSection:
    num_layers: int = 5
    channels: int = 16
    kernel_size: int = 3
    activation: str = "relu"
    slope: float = 0.01


@dataclass
class SolverSection:
    lam: float = 10.0
    m: float = 0.1
    alpha: float = None
    tol_fwd: float = 1e-4
    tol_bwd: float = 1e-4
    max_iter_fwd: int = 200
    max_iter_bwd: int = 200
    anderson_depth: int = 0
    anderson_backward: bool = False
    divergence_threshold: float = 1e6
    strict: bool = False


@dataclass
class TrainingSection:
    epochs: int = 12
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lip_weight: float = 3.0
    lip_ascent_steps: int = 10
    lip_step_size: float = 1.0
    mode: str = "mol-lr"
    m_target: float = 0.1
    sn_power_iters: int = 10
    checkpoint_every: int = 1


@dataclass
class AnalysisSection:
    problems: int = 5
    adjoint_trials: int = 20
    margin_samples: int = 200
    robustness_trials: int = 20
    perturb_scale: float = 1e-2
    lip_steps: int = 10
    gradcheck_params: int = 5
    gradcheck_tol: float = 1e-3
    bench_repeats: int = 3
    bench_unrolls: list = field(default_factory=lambda: [1, 2, 5, 10])


SECTIONS = {
    "dataset": DatasetSection,
    "operator": OperatorSection,
    "network": NetworkSection,
    "solver": SolverSection,
    "training": TrainingSection,
    "analysis": AnalysisSection,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    operator: OperatorSection = field(default_factory=OperatorSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    solver: SolverSection = field(default_factory=SolverSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def network_config(self):
        return NetworkConfig(image_shape=tuple(self.dataset.shape), **asdict(self.network))

    def solver_config(self):
        return SolverConfig(**asdict(self.solver))

    def train_config(self):
        opts = asdict(self.training)
        opts.pop("checkpoint_every")
        return TrainConfig(seed=self.seed, **opts)

    def validate(self):
        """Build every library config once so range errors surface as :class:`ConfigError`."""
        try:
            self.network_config()
            self.solver_config()
            self.train_config()
        except (ParameterError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.dataset.shape) != 2 or len(self.dataset.split_fractions) != 3:
            raise ConfigError("dataset.shape needs 2 entries and dataset.split_fractions 3")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        return self


def _build_section(name, cls, raw, errors):
    if not isinstance(raw, dict):
        errors.append(f"{name}: expected an object")
        return cls()
    known = {f.name for f in fields(cls)}
    errors += [f"{name}.{key}" for key in sorted(set(raw) - known)]
    return cls(**{k: v for k, v in raw.items() if k in known})


def parse_config(raw):
    """Build an :class:`ExperimentConfig` from a decoded JSON object."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    errors = [key for key in sorted(set(raw) - set(SECTIONS) - {"seed"})]
    sections = {name: _build_section(name, cls, raw.get(name, {}), errors)
                for name, cls in SECTIONS.items()}
    if errors:
        raise ConfigError("unknown configuration keys: " + ", ".join(errors))
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    return ExperimentConfig(seed=seed, **sections).validate()


def load_config(path):
    """Read and strictly parse a JSON configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return parse_config(raw)
