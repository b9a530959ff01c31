"""Experiment configuration: a single JSON document with a versioned schema.

Every seed used by a run is resolved at load time and written back into the
snapshot, so a stored snapshot replays without consulting ``global_seed``.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from advwt.attack import AttackConfig
from advwt.classifier import ModelSpec, TrainConfig
from advwt.signs import item_seed

SCHEMA = "advwt-experiment/1"
EXPERIMENTS = ("attack", "transfer", "alpha_sweep", "defense_at", "ood", "corruption_stability", "timing")
DEFAULT_ALPHAS = (0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class DatasetSource:
    source: str = "synthetic"  # synthetic | external | manifest
    n_per_class: int = 100
    resolution: int = 64
    seed: int = 0
    train_dir: str = ""
    test_dir: str = ""
    manifest: str = ""
    max_test_items: int = 0  # 0 = all


@dataclass(frozen=True)
class ModelEntry:
    name: str
    spec: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig()
    path: str = ""  # load a trained model instead of training


@dataclass(frozen=True)
class DefenseConfig:
    probability: float = 0.5
    # budget of the attack used inside the training loop
    aug_steps_K: int = 15
    aug_samples_T: int = 4
    corruption_max_severity: int = 5


@dataclass(frozen=True)
class OODConfig:
    mapper_seed: int = 0
    texture_seed: int = 0
    data_seed: int = 0
    code_scale_min: float = 1.0
    code_scale_max: float = 4.0


@dataclass(frozen=True)
class AnalysisConfig:
    threshold: float = 0.05
    bins: int = 36
    mode: str = "full_spectrum"


@dataclass(frozen=True)
class DamageConfig:
    style_dim: int = 64
    noise_dim: int = 16
    mapper_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    dataset: DatasetSource = DatasetSource()
    models: tuple = ()
    attack: AttackConfig = AttackConfig()
    damage: DamageConfig = DamageConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    alphas: tuple = DEFAULT_ALPHAS
    defense: DefenseConfig = DefenseConfig()
    ood: OODConfig = OODConfig()
    output_dir: str = "runs/out"
    global_seed: int = 0
    base_dir: str = field(default="", compare=False)

    def to_dict(self):
        d = {"schema": SCHEMA}
        for f in fields(self):
            if f.name == "base_dir":
                continue
            d[f.name] = _plain(getattr(self, f.name))
        return d

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _plain(v):
    if hasattr(v, "__dataclass_fields__"):
        return {k: _plain(x) for k, x in asdict(v).items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _model_entry(data, k):
    where = f"models[{k}]"
    if not isinstance(data, dict) or "name" not in data:
        raise ConfigError(f"{where}: need an object with a name")
    unknown = sorted(set(data) - {"name", "spec", "train", "path"})
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        spec = ModelSpec.from_dict(data.get("spec", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.spec: {exc}") from exc
    return ModelEntry(str(data["name"]), spec, _build(TrainConfig, data.get("train"), f"{where}.train"),
                      str(data.get("path", "")))


def from_dict(data, base_dir=""):
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if data.get("schema") != SCHEMA:
        raise ConfigError(f"unsupported config schema {data.get('schema')!r} (expected {SCHEMA!r})")
    exp = data.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")
    known = {f.name for f in fields(ExperimentConfig)} | {"schema"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    g = int(data.get("global_seed", 0))
    ds = dict(data.get("dataset") or {})
    ds.setdefault("seed", item_seed(g, 1))
    att = dict(data.get("attack") or {})
    att.setdefault("rng_seed", item_seed(g, 2))
    att.setdefault("texture_seed", item_seed(g, 3))
    models = [_model_entry(m, k) for k, m in enumerate(data.get("models") or [])]
    models = [m if "seed" in ((data["models"][k].get("train") or {})) else
              replace(m, train=replace(m.train, seed=item_seed(g, 100 + k))) for k, m in enumerate(models)]
    if len({m.name for m in models}) != len(models):
        raise ConfigError("model names must be unique")
    ood = dict(data.get("ood") or {})
    ood.setdefault("mapper_seed", item_seed(g, 4))
    ood.setdefault("texture_seed", item_seed(g, 5))
    ood.setdefault("data_seed", item_seed(g, 6))
    alphas = tuple(float(a) for a in data.get("alphas", DEFAULT_ALPHAS))
    cfg = ExperimentConfig(
        experiment=exp,
        dataset=_build(DatasetSource, ds, "dataset"),
        models=tuple(models),
        attack=_build(AttackConfig, att, "attack"),
        damage=_build(DamageConfig, data.get("damage"), "damage"),
        analysis=_build(AnalysisConfig, data.get("analysis"), "analysis"),
        alphas=alphas,
        defense=_build(DefenseConfig, data.get("defense"), "defense"),
        ood=_build(OODConfig, ood, "ood"),
        output_dir=str(data.get("output_dir", "runs/out")),
        global_seed=g,
        base_dir=str(base_dir),
    )
    validate(cfg)
    return cfg


def resolve_path(cfg, p):
    path = Path(p)
    if not path.is_absolute() and cfg.base_dir:
        path = Path(cfg.base_dir) / path
    return path


def validate(cfg):
    ds = cfg.dataset
    if ds.source not in ("synthetic", "external", "manifest"):
        raise ConfigError(f"dataset.source must be synthetic, external or manifest, got {ds.source!r}")
    if ds.source == "synthetic" and ds.n_per_class < 2:
        raise ConfigError("dataset.n_per_class must be >= 2")
    if ds.resolution < 32:
        raise ConfigError("dataset.resolution must be >= 32")
    if ds.source == "external":
        for key in ("train_dir", "test_dir"):
            p = getattr(ds, key)
            if not p or not resolve_path(cfg, p).is_dir():
                raise ConfigError(f"dataset.{key} {p!r} is not a directory")
    if ds.source == "manifest" and not resolve_path(cfg, ds.manifest).is_file():
        raise ConfigError(f"dataset.manifest {ds.manifest!r} does not exist")
    for m in cfg.models:
        if m.path and not resolve_path(cfg, m.path).is_file():
            raise ConfigError(f"model {m.name}: file {m.path!r} does not exist")
    if not cfg.models:
        raise ConfigError("at least one model entry is required")
    if cfg.experiment == "transfer" and len(cfg.models) < 2:
        raise ConfigError("transfer needs at least 2 models")
    al = list(cfg.alphas)
    if not al or al != sorted(al) or al[0] <= 0 or al[-1] > cfg.attack.c_max + 1e-9:
        raise ConfigError("alphas must be sorted ascending within (0, c_max]")
    if not 0.0 <= cfg.defense.probability <= 1.0:
        raise ConfigError("defense.probability must be in [0, 1]")
    if cfg.analysis.mode not in ("full_spectrum", "orientation_bins"):
        raise ConfigError(f"analysis.mode {cfg.analysis.mode!r} unknown")
    if cfg.damage.style_dim < 16:
        raise ConfigError("damage.style_dim must be >= 16")
    if cfg.ood.code_scale_min <= 0 or cfg.ood.code_scale_max < cfg.ood.code_scale_min:
        raise ConfigError("ood code scale range is invalid")


def load_config(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data, base_dir=str(path.parent))


def with_overrides(cfg, seed=None, out=None):
    """Apply CLI ``--seed`` / ``--out`` overrides.

    A new global seed re-derives every seed, including ones set explicitly.
    """
    if seed is not None:
        data = cfg.to_dict()
        data["global_seed"] = int(seed)
        for key in ("dataset", "attack", "ood"):
            for s in ("seed", "rng_seed", "texture_seed", "mapper_seed", "data_seed"):
                data[key].pop(s, None)
        for m in data["models"]:
            m["train"].pop("seed", None)
        cfg = from_dict(data, cfg.base_dir)
    if out is not None:
        cfg = replace(cfg, output_dir=str(out))
    return cfg
