"""Settings and model-config loader for raggedshard.

Loads planner/simulation defaults from settings.yaml and model tensor
lists from JSON configs, validates them, and exposes the groups (FSDP
wrapping units) the CLI plans one at a time.

Usage:
    from configs.loader import load_model_config, load_settings

    settings = load_settings()
    config = load_model_config("gpt_oss_120b")
    for group in config.groups:
        print(group.name, len(group.tensors), group.repeat)

Run directly to see a config's status:
    python -m configs.loader configs/models/deepseek_v3_671b.json
"""
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import yaml

from raggedshard.core import GranularitySpec, TensorSpec, resolve_granularity
from raggedshard.errors import ConfigError, NonDividingGranularity

CONFIG_DIR = Path(__file__).parent
MODELS_DIR = CONFIG_DIR / "models"

DEFAULT_SETTINGS = {
    "planner": {"gcoll_bytes": 16, "ordering": "default", "refine_budget": 20000},
    "sweep": {"devices": [8, 16, 32, 64, 128, 256, 512], "granularities": [1, 16, 128]},
    "muon": {"lr": 0.02, "beta": 0.95, "nesterov": False, "ns_steps": 10},
    "quant": {"block": [32, 32]},
    "simulate": {"devices": 4, "steps": 50, "seed": 0, "max_rel_error": 1e-6},
    "mesh": {"rendezvous_timeout_s": 30},
}


# ------------------------------------------------------------------
# Settings
# ------------------------------------------------------------------


def load_settings(config_path: Optional[Union[str, Path]] = None) -> dict:
    """Load settings.yaml merged over the built-in defaults.

    Args:
        config_path: Path to a settings file. Defaults to the file in the
                     same directory as this module.

    Returns:
        Dictionary of setting sections keyed by name.
    """
    if config_path is None:
        config_path = CONFIG_DIR / "settings.yaml"

    try:
        with open(config_path) as f:
            loaded = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ConfigError(f"Cannot read settings file {config_path}: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ConfigError(f"Settings file {config_path} must hold a mapping")

    settings = {section: dict(values) for section, values in DEFAULT_SETTINGS.items()}
    for section, values in loaded.items():
        if not isinstance(values, dict):
            raise ConfigError(f"Settings section '{section}' must be a mapping")
        settings.setdefault(section, {}).update(values)
    return settings


# ------------------------------------------------------------------
# Model configs
# ------------------------------------------------------------------


@dataclass(frozen=True)
class TensorGroup:
    """One FSDP wrapping unit: planned independently, possibly repeated."""

    name: str
    tensors: tuple[TensorSpec, ...]
    repeat: int = 1
    quantized: frozenset = frozenset()
    quant_blocks: dict = field(default_factory=dict, compare=False)

    @property
    def elements(self) -> int:
        return sum(t.numel for t in self.tensors)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    groups: tuple[TensorGroup, ...]
    provenance: str = ""

    @property
    def total_elements(self) -> int:
        return sum(g.elements * g.repeat for g in self.groups)

    @property
    def num_tensors(self) -> int:
        return sum(len(g.tensors) * g.repeat for g in self.groups)


def resolve_config_path(name_or_path: Union[str, Path]) -> Path:
    """Map a bundled config name (e.g. 'toy') or a file path to a path."""
    path = Path(name_or_path)
    if path.suffix == ".json" or path.exists():
        return path
    return MODELS_DIR / f"{name_or_path}.json"


def _raw_groups(data: dict) -> list[dict]:
    if "groups" in data:
        return data["groups"]
    return [{"name": data.get("name", "model"), "tensors": data.get("tensors", [])}]


def _expand(entry: dict) -> list[dict]:
    repeat = int(entry.get("repeat", 1))
    if repeat == 1:
        return [entry]
    return [{**entry, "name": entry["name"].replace("{i}", str(i)), "repeat": 1} for i in range(repeat)]


def validate_model_config(data: dict, check_granularity: bool = True) -> list[dict]:
    """Check a raw model config for structural problems.

    Args:
        data: The parsed JSON document.
        check_granularity: Also report granularities that do not divide
                           their tensor.

    Returns:
        List of issue dicts, each with 'group', 'tensor' and 'issue' keys.
        Empty list means the config can be planned.
    """
    issues = []
    if not isinstance(data, dict):
        return [{"group": "", "tensor": "", "issue": "Config must be a JSON object"}]
    groups = _raw_groups(data)
    if not isinstance(groups, list) or not groups:
        return [{"group": "", "tensor": "", "issue": "Config has no groups or tensors"}]

    default_bytes = data.get("dtype_bytes", 2)
    owner: dict[str, str] = {}
    for g_index, group in enumerate(groups):
        gname = group.get("name", f"group{g_index}")
        if int(group.get("repeat", 1)) < 1:
            issues.append({"group": gname, "tensor": "", "issue": "Group repeat must be >= 1"})
        entries = group.get("tensors", [])
        if not entries:
            issues.append({"group": gname, "tensor": "", "issue": "Group has no tensors"})
            continue
        widths = set()
        for entry in entries:
            tname = entry.get("name", "")
            if not tname or "shape" not in entry:
                issues.append({"group": gname, "tensor": tname, "issue": "Tensor needs 'name' and 'shape'"})
                continue
            repeat = entry.get("repeat", 1)
            if not isinstance(repeat, int) or repeat < 1:
                issues.append({"group": gname, "tensor": tname, "issue": "Tensor repeat must be a positive integer"})
                continue
            if repeat > 1 and "{i}" not in tname:
                issues.append({"group": gname, "tensor": tname, "issue": "Repeated tensor name needs '{i}'"})
            shape = entry["shape"]
            if not isinstance(shape, list) or not shape or not all(isinstance(d, int) and d > 0 for d in shape):
                issues.append({"group": gname, "tensor": tname, "issue": f"Bad shape {shape}"})
                continue
            kind = entry.get("granularity", {}).get("kind", "element")
            if kind not in ("element", "rows", "block"):
                issues.append({"group": gname, "tensor": tname, "issue": f"Unknown granularity kind '{kind}'"})
                continue
            widths.add(entry.get("dtype_bytes", default_bytes))
            for expanded in _expand(entry):
                name = expanded["name"]
                if name in owner:
                    other = owner[name]
                    issue = "Duplicate tensor name" if other == gname else f"Tensor name already used in group '{other}'"
                    issues.append({"group": gname, "tensor": name, "issue": issue})
                else:
                    owner[name] = gname
            if not check_granularity:
                continue
            try:
                resolve_granularity(_build_tensor(entry, default_bytes, 0))
            except (NonDividingGranularity, ValueError) as exc:
                issues.append({"group": gname, "tensor": tname, "issue": str(exc)})
        if len(widths) > 1:
            issues.append({"group": gname, "tensor": "", "issue": f"Group mixes dtype widths {sorted(widths)}"})
    return issues


def _build_tensor(entry: dict, default_bytes: int, order_index: int) -> TensorSpec:
    return TensorSpec(
        name=entry["name"],
        shape=tuple(entry["shape"]),
        elem_bytes=int(entry.get("dtype_bytes", default_bytes)),
        granularity=GranularitySpec.from_dict(entry.get("granularity", {"kind": "element"})),
        order_index=order_index,
    )


def parse_model_config(data: dict, default_name: str = "model") -> ModelConfig:
    """Build a ModelConfig from a parsed document.

    Raises NonDividingGranularity for granularities that do not divide their
    tensor and ConfigError for every other problem.
    """
    issues = validate_model_config(data, check_granularity=False)
    if issues:
        first = issues[0]
        raise ConfigError(
            f"{len(issues)} config issue(s); first: {first['group']}/{first['tensor']}: {first['issue']}"
        )
    default_bytes = data.get("dtype_bytes", 2)
    groups = []
    for g_index, raw in enumerate(_raw_groups(data)):
        tensors, quantized, blocks = [], set(), {}
        for entry in raw.get("tensors", []):
            for expanded in _expand(entry):
                t = _build_tensor(expanded, default_bytes, len(tensors))
                resolve_granularity(t)
                tensors.append(t)
                if expanded.get("quantized", False):
                    quantized.add(t.name)
                if "quant_block" in expanded:
                    blocks[t.name] = tuple(int(b) for b in expanded["quant_block"])
        groups.append(
            TensorGroup(
                name=raw.get("name", f"group{g_index}"),
                tensors=tuple(tensors),
                repeat=int(raw.get("repeat", 1)),
                quantized=frozenset(quantized),
                quant_blocks=blocks,
            )
        )
    return ModelConfig(name=data.get("name", default_name), groups=tuple(groups), provenance=data.get("provenance", ""))


def _read_json(path: Path):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise ConfigError(f"Cannot read model config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Model config {path} is not valid JSON: {exc}") from exc


def load_model_config(name_or_path: Union[str, Path]) -> ModelConfig:
    """Load and validate a JSON model config by bundled name or path."""
    path = resolve_config_path(name_or_path)
    data = _read_json(path)
    return parse_model_config(data, default_name=path.stem)


def get_group(config: ModelConfig, name: str) -> TensorGroup:
    """Return the named group, or raise ConfigError."""
    for group in config.groups:
        if group.name == name:
            return group
    raise ConfigError(f"Unknown group '{name}' in config {config.name}")


def with_row_granularity(config: ModelConfig, rows: int) -> ModelConfig:
    """Set Rows(rows) on every quantized tensor; other tensors keep their granularity."""
    groups = []
    for group in config.groups:
        tensors = tuple(
            replace(t, granularity=GranularitySpec.rows(rows)) if t.name in group.quantized else t
            for t in group.tensors
        )
        for t in tensors:
            resolve_granularity(t)
        groups.append(replace(group, tensors=tensors))
    return replace(config, groups=tuple(groups))


def print_config_status(name_or_path: Union[str, Path]):
    """Print a formatted summary of a model config's groups."""
    path = resolve_config_path(name_or_path)
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"Model config {path} must hold a JSON object")
    issues = validate_model_config(data)

    print(f"\n  raggedshard - Model Config: {data.get('name', path.stem)}\n")
    if data.get("provenance"):
        print(f"  {data['provenance'][:100]}\n")
    print(f"  {'Group':<20} {'Tensors':>8} {'Repeat':>7} {'Elements':>16} {'Status'}")
    print(f"  {'-'*20} {'-'*8} {'-'*7} {'-'*16} {'-'*10}")

    bad_groups = {i["group"] for i in issues}
    for g_index, raw in enumerate(_raw_groups(data)):
        name = raw.get("name", f"group{g_index}")
        entries = [e for entry in raw.get("tensors", []) if "shape" in entry for e in _expand(entry)]
        elements = sum(math.prod(e["shape"]) for e in entries)
        status = "INVALID" if name in bad_groups else "OK"
        print(f"  {name:<20} {len(entries):>8} {raw.get('repeat', 1):>7} {elements:>16,} {status}")

    if issues:
        print("\n  Issues:")
        for issue in issues:
            print(f"    - {issue['group']}/{issue['tensor']}: {issue['issue']}")

    print()
    return issues


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "toy"
    try:
        sys.exit(1 if print_config_status(target) else 0)
    except ConfigError as exc:
        print(f"  {exc}", file=sys.stderr)
        sys.exit(1)
