"""Experiment configuration: INI-style files, presets, dotted overrides.

A configuration is a flat mapping from ``section.key`` strings to text
values.  Every key lives in the schema below, which doubles as the source of
the shipped ``presets/schema.txt`` documentation; unknown keys are rejected
by name, both in files and in ``--set`` overrides.  Custom attack suites can
be declared inline with ``[attack.NAME]`` sections and referenced from
``eval.attacks`` alongside the built-in presets.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .defense import ATTACK_PRESETS, AttackConfig, DefenseConfig, attack_preset
from .errors import ConfigError
from .memory import MemoryConfig
from .network import LayerSpec, NetworkSpec

_DATA_SOURCES = ("synthetic", "idx")
_BENCHMARKS = ("permutation", "rotation", "class_subset")


def fraction(text: str) -> float:
    """Parse a float, allowing ``a/b`` ratios like ``25/255``."""
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        return float(num) / float(den)
    return float(text)


def _parse_str(text: str) -> str:
    return text.strip()


def _parse_int(text: str) -> int:
    return int(text.strip())


def _parse_float(text: str) -> float:
    return fraction(text)


def _parse_bool(text: str):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _split_words(text: str) -> list:
    return text.replace(",", " ").split()


def _parse_ints(text: str) -> tuple:
    return tuple(int(w) for w in _split_words(text))


def _parse_names(text: str) -> tuple:
    return tuple(_split_words(text))


def _parse_alpha1(text: str):
    """Scalar, per-layer list, or linear-in-task schedule like ``0.97 + 0.003*t``."""
    text = text.strip()
    if "+" in text or "*" in text:
        return text
    values = tuple(float(w) for w in _split_words(text))
    if not values:
        raise ValueError("empty alpha1")
    return values[0] if len(values) == 1 else values


@dataclass(frozen=True)
class _Field:
    parse: object
    default: str
    help: str


# One entry per configuration key.  Defaults are textual so that files,
# overrides, and defaults all flow through the same parsers.
SCHEMA = {
    "experiment.name": _Field(_parse_str, "experiment", "label used in logs and reports"),
    "experiment.seeds": _Field(_parse_ints, "0", "run seeds, space- or comma-separated"),
    "experiment.output": _Field(_parse_str, "runs/out", "result archive directory"),
    "data.source": _Field(_parse_str, "synthetic", "synthetic | idx (IDX files on disk)"),
    "data.root": _Field(_parse_str, "", "directory with IDX files; DGP_DATA_DIR is the fallback"),
    "data.benchmark": _Field(_parse_str, "permutation", "permutation | rotation | class_subset"),
    "data.num_tasks": _Field(_parse_int, "5", "length of the task sequence"),
    "data.train_per_task": _Field(_parse_int, "2000", "training samples drawn per task (capped at available)"),
    "data.test_per_task": _Field(_parse_int, "1000", "test samples drawn per task (capped at available)"),
    "data.downscale": _Field(_parse_int, "1", "integer image downscale factor (2 halves 28x28 to 14x14)"),
    "data.seed": _Field(_parse_int, "0", "seed of the synthetic base corpus (fixed across run seeds)"),
    "data.synthetic_classes": _Field(_parse_int, "10", "class count of the synthetic corpus"),
    "data.synthetic_noise": _Field(_parse_float, "0.1", "pixel noise level of the synthetic corpus"),
    "data.synthetic_contrast": _Field(_parse_float, "0.62", "brightness of the class-signature masks"),
    "data.synthetic_size": _Field(_parse_int, "14", "side length of the square synthetic images"),
    "data.synthetic_styles": _Field(_parse_int, "80", "count of label-free clutter patterns in the corpus"),
    "data.synthetic_style_px": _Field(_parse_int, "40", "bright pixels per clutter pattern"),
    "data.synthetic_sig_px": _Field(_parse_int, "8", "pixels per class-signature mask"),
    "data.synthetic_sig_zone": _Field(_parse_int, "100", "pixels reserved for class signatures"),
    "network.preset": _Field(_parse_str, "mlp-256", "mlp-100 | mlp-256 | conv-desk"),
    "network.bn_mode": _Field(_parse_str, "tracked", "batch-norm statistics mode; only 'tracked' exists"),
    "train.lr": _Field(_parse_float, "0.05", "gradient-descent learning rate"),
    "train.batch_size": _Field(_parse_int, "32", "training batch size"),
    "train.epochs": _Field(_parse_int, "10", "epochs per task"),
    "defense.kind": _Field(_parse_str, "none", "none | igr | at"),
    "defense.lambda": _Field(_parse_float, "0", "input-gradient regularization strength"),
    "defense.squared": _Field(_parse_bool, "true", "penalize the squared input-gradient norm (false: plain norm)"),
    "defense.at_mix": _Field(_parse_float, "0.5", "fraction of each batch replaced by adversarial samples"),
    "defense.at_epsilon": _Field(_parse_float, "25/255", "FGSM step used to craft training adversaries"),
    "memory.mode": _Field(_parse_str, "none", "dgp | gpm (activation bases only) | none (plain SGD)"),
    "memory.alpha1": _Field(_parse_alpha1, "1", "activation threshold: scalar, per-layer list, or 'a + b*t'"),
    "memory.alpha2": _Field(_parse_float, "1", "gradient-basis threshold"),
    "memory.alpha3": _Field(_parse_float, "1", "compression threshold for near-full pools"),
    "memory.memory_size": _Field(_parse_int, "300", "stored samples per task for basis extraction"),
    "eval.attacks": _Field(_parse_names, "", "attack suite: built-in preset names and/or [attack.NAME] sections"),
    "eval.max_eval_samples": _Field(_parse_int, "500", "per-task cap on (adversarially) evaluated test samples"),
}

# Keys allowed inside an [attack.NAME] section.
ATTACK_FIELDS = {
    "kind": _Field(_parse_str, "fgsm", "fgsm | pgd"),
    "xi": _Field(_parse_float, "0", "per-step perturbation size"),
    "delta": _Field(_parse_float, "0", "total perturbation budget (pgd; 0 falls back to xi)"),
    "steps": _Field(_parse_int, "0", "pgd step count; 0 picks max(1, 2*ceil(delta/xi))"),
    "restarts": _Field(_parse_int, "1", "pgd random restarts, best loss kept"),
    "random_start": _Field(_parse_bool, "true", "start pgd from a random point in the budget ball"),
    "pixel_min": _Field(_parse_float, "0", "lower clip bound"),
    "pixel_max": _Field(_parse_float, "1", "upper clip bound"),
}


def render_schema() -> str:
    """Documentation text for every key; shipped as ``presets/schema.txt``."""
    lines = [
        "Configuration schema",
        "====================",
        "",
        "INI syntax: [section] headers, key = value lines, '#' comments.",
        "Every key below may also be set on the command line with",
        "--set section.key=value.  Ratios like 25/255 are accepted wherever",
        "a float is.  Defaults shown in parentheses.",
        "",
    ]
    section = None
    for key, field in SCHEMA.items():
        sec, _, name = key.partition(".")
        if sec != section:
            lines.append(f"[{sec}]")
            section = sec
        default = field.default if field.default else "''"
        lines.append(f"  {name} ({default}): {field.help}")
    lines += [
        "",
        "[attack.NAME]",
        "  Declares a custom attack usable from eval.attacks under NAME.",
    ]
    for name, field in ATTACK_FIELDS.items():
        lines.append(f"  {name} ({field.default}): {field.help}")
    lines.append("")
    return "\n".join(lines)


def _known_keys_message(section: str) -> str:
    if section.startswith("attack."):
        names = ", ".join(ATTACK_FIELDS)
    else:
        names = ", ".join(
            k.split(".", 1)[1] for k in SCHEMA if k.startswith(section + ".")
        )
    return f"known keys in [{section}]: {names}"


def _check_key(key: str, where: str):
    section = key.rpartition(".")[0]
    if section.startswith("attack.") and section.count(".") == 1:
        field = key.rpartition(".")[2]
        if field not in ATTACK_FIELDS:
            raise ConfigError(
                f"unknown configuration key {key!r} in {where} "
                f"({_known_keys_message(section)})"
            )
        return
    if key not in SCHEMA:
        sections = sorted({k.partition(".")[0] for k in SCHEMA})
        if section and any(k.startswith(section + ".") for k in SCHEMA):
            raise ConfigError(
                f"unknown configuration key {key!r} in {where} "
                f"({_known_keys_message(section)})"
            )
        raise ConfigError(
            f"unknown configuration key {key!r} in {where} "
            f"(sections: {', '.join(sections)}, attack.NAME)"
        )


def read_config_file(path) -> dict:
    """Parse one INI file into a validated flat ``section.key -> text`` map."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def parse_config_text(text: str, source: str) -> dict:
    parser = configparser.ConfigParser(
        interpolation=None,
        delimiters=("=",),
        comment_prefixes=("#", ";"),
        inline_comment_prefixes=("#",),
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        # configparser messages carry the offending line
        raise ConfigError(f"config parse error: {exc}") from exc
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            full = f"{section}.{key}"
            _check_key(full, source)
            flat[full] = value
    return flat


def apply_overrides(raw: dict, pairs) -> dict:
    """Overlay ``section.key=value`` strings; unknown keys are named."""
    merged = dict(raw)
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip()
        if not sep or not key or "." not in key:
            raise ConfigError(
                f"override {pair!r} is not of the form section.key=value"
            )
        _check_key(key, "--set override")
        merged[key] = value.strip()
    return merged


def _typed_values(raw: dict) -> dict:
    values = {}
    for key, field in SCHEMA.items():
        text = raw.get(key, field.default)
        try:
            values[key] = field.parse(text)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from exc
    return values


def _custom_attacks(raw: dict) -> dict:
    sections = {}
    for key, text in raw.items():
        section = key.rpartition(".")[0]
        if section.startswith("attack."):
            sections.setdefault(section.split(".", 1)[1], {})[
                key.rpartition(".")[2]
            ] = text
    attacks = {}
    for name, fields in sections.items():
        kwargs = {}
        for field_name, field in ATTACK_FIELDS.items():
            text = fields.get(field_name, field.default)
            try:
                kwargs[field_name] = field.parse(text)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(
                    f"bad value for 'attack.{name}.{field_name}': {text!r} ({exc})"
                ) from exc
        attacks[name] = AttackConfig(**kwargs)
    return attacks


@dataclass(frozen=True)
class DataConfig:
    """Where samples come from and how the task sequence reshapes them."""

    source: str = "synthetic"
    root: str = ""
    benchmark: str = "permutation"
    num_tasks: int = 5
    train_per_task: int = 2000
    test_per_task: int = 1000
    downscale: int = 1
    seed: int = 0
    synthetic_classes: int = 10
    synthetic_noise: float = 0.1
    synthetic_contrast: float = 0.62
    synthetic_size: int = 14
    synthetic_styles: int = 80
    synthetic_style_px: int = 40
    synthetic_sig_px: int = 8
    synthetic_sig_zone: int = 100

    def __post_init__(self):
        if self.source not in _DATA_SOURCES:
            raise ConfigError(
                f"unknown data source {self.source!r} "
                f"(choose from {', '.join(_DATA_SOURCES)})"
            )
        if self.benchmark not in _BENCHMARKS:
            raise ConfigError(
                f"unknown benchmark {self.benchmark!r} "
                f"(choose from {', '.join(_BENCHMARKS)})"
            )
        for name in (
            "num_tasks", "train_per_task", "test_per_task", "downscale",
            "synthetic_size", "synthetic_styles", "synthetic_style_px",
            "synthetic_sig_px", "synthetic_sig_zone",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one ``run_experiment`` call needs, fully resolved."""

    name: str
    seeds: tuple
    output: str
    data: DataConfig
    network_preset: str
    lr: float
    batch_size: int
    epochs: int
    defense: DefenseConfig
    memory: MemoryConfig
    attacks: tuple
    max_eval_samples: int

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("experiment.seeds must list at least one seed")
        if self.network_preset not in NETWORK_PRESETS:
            raise ConfigError(
                f"unknown network preset {self.network_preset!r} "
                f"(available: {', '.join(sorted(NETWORK_PRESETS))})"
            )
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train.batch_size and train.epochs must be >= 1")
        if self.max_eval_samples < 1:
            raise ConfigError("eval.max_eval_samples must be >= 1")

    def attack_suite(self) -> dict:
        return dict(self.attacks)


def build_experiment_config(raw: dict) -> ExperimentConfig:
    """Assemble the typed configuration from a flat text mapping."""
    v = _typed_values(raw)
    if v["network.bn_mode"] != "tracked":
        raise ConfigError(
            f"bn_mode {v['network.bn_mode']!r} is not supported: normalization "
            "uses tracked running statistics only"
        )
    custom = _custom_attacks(raw)
    suite = []
    for name in v["eval.attacks"]:
        if name in custom:
            suite.append((name, custom[name]))
        elif name in ATTACK_PRESETS:
            suite.append((name, attack_preset(name)))
        else:
            available = sorted(set(ATTACK_PRESETS) | set(custom))
            raise ConfigError(
                f"unknown attack {name!r} in eval.attacks "
                f"(available: {', '.join(available)})"
            )
    data = DataConfig(
        source=v["data.source"],
        root=v["data.root"],
        benchmark=v["data.benchmark"],
        num_tasks=v["data.num_tasks"],
        train_per_task=v["data.train_per_task"],
        test_per_task=v["data.test_per_task"],
        downscale=v["data.downscale"],
        seed=v["data.seed"],
        synthetic_classes=v["data.synthetic_classes"],
        synthetic_noise=v["data.synthetic_noise"],
        synthetic_contrast=v["data.synthetic_contrast"],
        synthetic_size=v["data.synthetic_size"],
        synthetic_styles=v["data.synthetic_styles"],
        synthetic_style_px=v["data.synthetic_style_px"],
        synthetic_sig_px=v["data.synthetic_sig_px"],
        synthetic_sig_zone=v["data.synthetic_sig_zone"],
    )
    defense = DefenseConfig(
        kind=v["defense.kind"],
        lam=v["defense.lambda"],
        squared=v["defense.squared"],
        at_mix=v["defense.at_mix"],
        at_epsilon=v["defense.at_epsilon"],
    )
    memory = MemoryConfig(
        alpha1=v["memory.alpha1"],
        alpha2=v["memory.alpha2"],
        alpha3=v["memory.alpha3"],
        memory_size=v["memory.memory_size"],
        mode=v["memory.mode"],
    )
    return ExperimentConfig(
        name=v["experiment.name"],
        seeds=v["experiment.seeds"],
        output=v["experiment.output"],
        data=data,
        network_preset=v["network.preset"],
        lr=v["train.lr"],
        batch_size=v["train.batch_size"],
        epochs=v["train.epochs"],
        defense=defense,
        memory=memory,
        attacks=tuple(suite),
        max_eval_samples=v["eval.max_eval_samples"],
    )


def load_experiment_config(path, overrides=()) -> ExperimentConfig:
    raw = read_config_file(path)
    raw = apply_overrides(raw, overrides)
    return build_experiment_config(raw)


# ---------------------------------------------------------------------------
# shipped presets


def _preset_dir():
    return resources.files("dgp") / "presets"


def available_config_presets() -> list:
    return sorted(
        p.name[: -len(".cfg")] for p in _preset_dir().iterdir() if p.name.endswith(".cfg")
    )


def resolve_config_path(name_or_path):
    """An existing file path, or the shipped preset of that name."""
    path = Path(name_or_path)
    if path.exists():
        return path
    stem = path.name[: -len(".cfg")] if path.name.endswith(".cfg") else path.name
    candidate = _preset_dir() / f"{stem}.cfg"
    if path.parent == Path(".") and candidate.is_file():
        return candidate
    raise ConfigError(
        f"config file {name_or_path!r} not found "
        f"(shipped presets: {', '.join(available_config_presets())})"
    )


# ---------------------------------------------------------------------------
# network presets


def _mlp_spec(n_inputs: int, width: int) -> NetworkSpec:
    return NetworkSpec(
        first=LayerSpec.linear(n_inputs, width),
        shared=(LayerSpec.linear(width, width),),
    )


def _conv_desk_spec(image_hw) -> NetworkSpec:
    h, w = image_hw
    first = LayerSpec.conv((1, h, w), 8, 3, pool="avg2")
    return NetworkSpec(
        first=first,
        shared=(LayerSpec.conv(first.out_shape(), 16, 3, has_bn=True, pool="avg2"),),
    )


NETWORK_PRESETS = {
    "mlp-100": lambda hw: _mlp_spec(hw[0] * hw[1], 100),
    "mlp-256": lambda hw: _mlp_spec(hw[0] * hw[1], 256),
    "conv-desk": _conv_desk_spec,
}


def build_network_spec(preset: str, image_hw) -> NetworkSpec:
    """Instantiate a named architecture for the given image geometry."""
    if preset not in NETWORK_PRESETS:
        raise ConfigError(
            f"unknown network preset {preset!r} "
            f"(available: {', '.join(sorted(NETWORK_PRESETS))})"
        )
    try:
        return NETWORK_PRESETS[preset](tuple(int(v) for v in image_hw))
    except ValueError as exc:
        raise ConfigError(
            f"network preset {preset!r} does not fit {image_hw[0]}x{image_hw[1]} "
            f"images ({exc})"
        ) from exc
