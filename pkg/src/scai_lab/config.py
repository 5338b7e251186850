"""One JSON run config with data / train / adapt / eval sections.

Unknown keys are rejected at every nesting level. Values are rebuilt into the
library's frozen dataclasses, so a loaded config is exactly what the code
runs with and ``to_dict`` round-trips it.
"""

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
import json
from pathlib import Path

from .inference import AdaptConfig
from .synth import DataConfig
from .training import TrainConfig

EVAL_MODES = ("sci", "sai", "correlate", "ablate", "local-search", "curves")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    samples: int = 0            # sci / sai: 0 = whole split
    batch: int = 64             # correlation batch size
    n_batches: int = 50         # correlation and curves
    search_iterations: int = 5
    search_sigma: float = 2.0
    search_samples: int = 512
    plots: bool = True

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.batch <= 0 or self.n_batches <= 0 or self.search_iterations < 0:
            raise ValueError("eval counts must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: str = ""           # "" = <out>/data
    threads: int = 0            # 0 = --threads / SCAI_LAB_THREADS / 1
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = TrainConfig()
    adapt: AdaptConfig = AdaptConfig()
    eval: EvalConfig = EvalConfig()

    def to_dict(self):
        return asdict(self)

    def with_seed(self, seed):
        """Propagate one global seed into every section."""
        return replace(self, seed=seed, data=replace(self.data, seed=seed),
                       train=replace(self.train, seed=seed), adapt=replace(self.adapt, seed=seed))


def _build(cls, template, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(path + k for k in unknown)}")
    kw = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        cur, val = getattr(template, f.name), d[f.name]
        if is_dataclass(cur):
            kw[f.name] = _build(type(cur), cur, val, f"{path}{f.name}.")
        elif isinstance(cur, tuple) and isinstance(val, list):
            kw[f.name] = tuple(tuple(v) if isinstance(v, list) else v for v in val)
        else:
            kw[f.name] = val
    try:
        return replace(template, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(d):
    return _build(RunConfig, RunConfig(), d, "")


def set_key(d, dotted, value):
    """Apply one ``a.b.c=value`` override to a plain dict (value parsed as JSON)."""
    try:
        value = json.loads(value)
    except ValueError:
        pass  # bare strings
    node = d
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value
    return d


def load(path=None, overrides=()):
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except ValueError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key=value")
        set_key(d, key, value)
    return from_dict(d)


def dump(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
