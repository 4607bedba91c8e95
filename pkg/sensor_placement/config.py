import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Dict, Any, Tuple

from dotenv import load_dotenv, dotenv_values

# Load environment variables
load_dotenv()


class ConfigError(ValueError):
    """Raised for invalid run configuration or missing input files"""


class Config:
    """Configuration class for the sensor placement pipeline"""

    # Output
    OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'oed_results')

    # Parallel workers (0 means all available cores)
    WORKERS = int(os.getenv('WORKERS', '0'))
    MASTER_SEED = int(os.getenv('MASTER_SEED', '20231'))

    # PDE solves: 'direct' (sparse LU per assembled system) or 'cg'
    PDE_SOLVER = os.getenv('PDE_SOLVER', 'direct')

    # Krylov tolerances
    CG_RTOL = float(os.getenv('CG_RTOL', '1e-10'))
    INNER_CG_RTOL = float(os.getenv('INNER_CG_RTOL', '1e-8'))
    CG_MAXITER = int(os.getenv('CG_MAXITER', '5000'))
    EIG_TRUNCATION = 1e-12

    # Gauss-Newton settings
    GN_RTOL = float(os.getenv('GN_RTOL', '1e-6'))
    GN_ATOL = float(os.getenv('GN_ATOL', '1e-9'))
    GN_MAXITER = int(os.getenv('GN_MAXITER', '100'))
    ARMIJO_C = 1e-4
    BACKTRACK_FACTOR = 0.5
    MAX_BACKTRACKS = 25
    STALL_RTOL = 1e-12

    # Validation runs with more failures than this are marked untrusted
    MAX_FAILURE_FRACTION = 0.05

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE', 'sensor_placement.log')

    @classmethod
    def resolved_workers(cls, requested: int = None) -> int:
        """Return the worker count, mapping 0/None to the available parallelism"""
        workers = cls.WORKERS if requested is None else requested
        if workers <= 0:
            workers = os.cpu_count() or 1
        return workers


# Section headers written to run files; keys are grouped by prefix.
_SECTIONS = {
    'mesh': ('nx', 'ny', 'nz'),
    'prior_m': ('theta', 'alpha', 'm_mean', 'm_robin_beta'),
    'prior_xi': ('Theta_diag', 'gamma', 'xi_mean', 'xi_robin_beta'),
    'noise': ('sigma',),
    'sensors': ('sensors_per_side', 'sensor_margin'),
    'sampling': ('n_mc', 'n_d', 'n_tr', 'n_v'),
    'design': ('objective', 'K', 'r_fixed'),
    'seeds': ('seed', 'validation_seed'),
    'run': ('output_dir', 'workers', 'reuse_bae_samples', 'warm_start', 'inversion_mode'),
}


@dataclass
class RunConfig:
    """All settings of one experiment run; defaults reproduce the 20x20x4 setup"""

    nx: int = 20
    ny: int = 20
    nz: int = 4

    theta: float = 0.1
    alpha: float = 1.0
    m_mean: float = 1.0
    m_robin_beta: float = -1.0  # negative selects sqrt(theta*alpha)/1.42

    Theta_diag: Tuple[float, float, float] = (0.25, 0.25, 0.0025)
    gamma: float = 50.0
    xi_mean: float = 0.0
    xi_robin_beta: float = -1.0

    sigma: float = 1e-3

    sensors_per_side: int = 10
    sensor_margin: float = 0.05

    n_mc: int = 1000
    n_d: int = 5
    n_tr: int = 30
    n_v: int = 100

    objective: str = 'eig'
    K: int = 10
    r_fixed: int = 0  # 0 selects r = number of active sensors

    seed: int = field(default_factory=lambda: Config.MASTER_SEED)
    validation_seed: int = 777

    output_dir: str = field(default_factory=lambda: Config.OUTPUT_DIR)
    workers: int = field(default_factory=lambda: Config.WORKERS)
    reuse_bae_samples: bool = False
    warm_start: bool = True
    inversion_mode: str = 'aware'

    def __post_init__(self):
        self.validate()

    @property
    def n_s(self) -> int:
        return self.sensors_per_side ** 2

    def validate(self):
        """Check value ranges; raise ConfigError on the first violation"""
        positive = ['nx', 'ny', 'nz', 'n_mc', 'n_d', 'n_tr', 'n_v', 'K',
                    'sensors_per_side', 'theta', 'alpha', 'gamma', 'sigma']
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.nx < 2 or self.ny < 2:
            raise ConfigError(f"mesh needs nx, ny >= 2, got ({self.nx}, {self.ny})")
        if len(self.Theta_diag) != 3 or min(self.Theta_diag) <= 0:
            raise ConfigError(f"Theta_diag must hold three positive values, got {self.Theta_diag}")
        if self.objective not in ('eig', 'trace'):
            raise ConfigError(f"objective must be 'eig' or 'trace', got {self.objective!r}")
        if self.inversion_mode not in ('aware', 'unaware'):
            raise ConfigError(f"inversion_mode must be 'aware' or 'unaware', got {self.inversion_mode!r}")
        if self.K > self.n_s:
            raise ConfigError(f"K={self.K} exceeds the number of candidate sensors {self.n_s}")
        if not 0.0 <= self.sensor_margin < 0.5:
            raise ConfigError(f"sensor_margin must lie in [0, 0.5), got {self.sensor_margin}")
        if self.r_fixed < 0:
            raise ConfigError(f"r_fixed must be nonnegative, got {self.r_fixed}")

    @classmethod
    def from_file(cls, path: str, use_environment: bool = True) -> 'RunConfig':
        """Parse a run file (dotenv syntax with '# [section]' headers)"""
        if not Path(path).is_file():
            raise ConfigError(f"Config file not found: {path}")
        raw = {k: v for k, v in dotenv_values(path).items() if v is not None}
        return cls.from_mapping(raw, use_environment=use_environment)

    @classmethod
    def from_mapping(cls, raw: Dict[str, str], use_environment: bool = False) -> 'RunConfig':
        """Build a RunConfig from string values, applying environment overrides"""
        known = {f.name: f for f in fields(cls)}
        lookup = {name.lower(): name for name in known}
        values: Dict[str, Any] = {}

        for key, text in raw.items():
            name = lookup.get(key.lower())
            if name is None:
                raise ConfigError(f"Unknown config key: {key}")
            values[name] = _coerce(name, cls.__dataclass_fields__[name].default, text)

        if use_environment:
            for name in known:
                override = os.getenv(name.upper())
                if override is not None:
                    values[name] = _coerce(name, getattr(cls(), name), override)

        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"Invalid config: {e}")

    def save(self, path: str):
        """Write the config in the same format from_file reads"""
        data = asdict(self)
        lines = []
        for section, names in _SECTIONS.items():
            lines.append(f"# [{section}]")
            for name in names:
                lines.append(f"{name.upper()}={_format(data[name])}")
            lines.append("")
        Path(path).write_text("\n".join(lines))

    def echo(self) -> Dict[str, Any]:
        """JSON-friendly view of the config"""
        data = asdict(self)
        data['Theta_diag'] = list(self.Theta_diag)
        return data


def _format(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, default, text: str):
    """Convert a config string to the type of the field default"""
    text = text.strip()
    try:
        if name == 'Theta_diag':
            return tuple(float(part) for part in text.split(','))
        if name in ('seed', 'workers'):
            return int(text)
        if name == 'output_dir':
            return text
        if isinstance(default, bool):
            if text.lower() not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ValueError(text)
            return text.lower() in ('true', '1', 'yes')
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"Invalid value for {name}: {text!r}")
