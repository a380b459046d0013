"""
Configuration tree, override merging and component registries.

Every pipeline is assembled declaratively: a Config names component types,
and the registries below map those names to builders.
"""

import copy
import hashlib
import inspect
import json
import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Union

import yaml

from fashion_errors import ConfigError, RegistryError

logger = logging.getLogger(__name__)

_MISSING = object()
_SCALARS = (str, int, float, bool, type(None))


def _check_tree(node: Any, path: str) -> None:
    """Validate keys and leaf types of a config tree"""
    if isinstance(node, Mapping):
        for key, value in node.items():
            if not isinstance(key, str) or not key:
                raise ConfigError(f"config keys must be non-empty strings (at '{path or '<root>'}')", path=path)
            _check_tree(value, f"{path}.{key}" if path else key)
    elif isinstance(node, (list, tuple)):
        for index, value in enumerate(node):
            _check_tree(value, f"{path}.{index}" if path else str(index))
    elif isinstance(node, float):
        if node != node or node in (float("inf"), float("-inf")):
            raise ConfigError(f"non-finite number at '{path}'", path=path)
    elif not isinstance(node, _SCALARS):
        raise ConfigError(f"unsupported value type {type(node).__name__} at '{path}'", path=path)


def _plain(node: Any) -> Any:
    """Deep copy into plain dict/list containers"""
    if isinstance(node, Config):
        return node.to_dict()
    if isinstance(node, Mapping):
        return {key: _plain(value) for key, value in node.items()}
    if isinstance(node, (list, tuple)):
        return [_plain(value) for value in node]
    return node


class Config:
    """Immutable hierarchical key-value tree addressed by dotted paths"""

    __slots__ = ("_tree", "source_path")

    def __init__(self, tree: Optional[Mapping] = None, source_path: Optional[Union[str, Path]] = None):
        tree = {} if tree is None else tree
        if not isinstance(tree, (Mapping, Config)):
            raise ConfigError(f"config root must be a mapping, got {type(tree).__name__}")
        plain = _plain(tree)
        _check_tree(plain, "")
        self._tree = plain
        self.source_path = Path(source_path) if source_path is not None else None

    def get(self, path: str, default: Any = _MISSING) -> Any:
        """Return the node at a dotted path; sub-mappings come back as Config"""
        node: Any = self._tree
        walked = []
        for segment in path.split(".") if path else []:
            walked.append(segment)
            if isinstance(node, dict) and segment in node:
                node = node[segment]
            elif isinstance(node, list) and segment.lstrip("-").isdigit() and -len(node) <= int(segment) < len(node):
                node = node[int(segment)]
            else:
                if default is not _MISSING:
                    return default
                raise ConfigError(f"missing config key '{'.'.join(walked)}'", path=".".join(walked))
        if isinstance(node, dict):
            return Config(node, source_path=self.source_path)
        return copy.deepcopy(node)

    def __getitem__(self, path: str) -> Any:
        return self.get(path)

    def __contains__(self, path: str) -> bool:
        sentinel = object()
        return self.get(path, sentinel) is not sentinel

    def keys(self) -> Iterable[str]:
        return list(self._tree.keys())

    def items(self):
        return [(key, self.get(key)) for key in self._tree]

    def __iter__(self):
        return iter(list(self._tree))

    def __len__(self) -> int:
        return len(self._tree)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Config):
            return self._tree == other._tree
        if isinstance(other, Mapping):
            return self._tree == _plain(other)
        return NotImplemented

    def __repr__(self) -> str:
        return f"Config({self._tree!r})"

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._tree)

    def serialize(self) -> str:
        """JSON text that load_config parses back to an equal tree"""
        return json.dumps(self._tree, indent=2, ensure_ascii=False) + "\n"

    def fingerprint(self, section: Optional[str] = None) -> str:
        """sha256 of the canonical JSON of the whole tree or one section"""
        node = self._tree if section is None else _plain(self.get(section))
        canonical = json.dumps(node, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class _DuplicateKey(Exception):
    def __init__(self, key: str):
        super().__init__(key)
        self.key = key


def _reject_duplicates(pairs):
    tree = {}
    for key, value in pairs:
        if key in tree:
            raise _DuplicateKey(key)
        tree[key] = value
    return tree


class _UniqueKeyLoader(yaml.SafeLoader):
    """SafeLoader that refuses duplicate mapping keys"""

    def construct_mapping(self, node, deep=False):
        seen = set()
        for key_node, _ in node.value:
            key = self.construct_object(key_node, deep=deep)
            if key in seen:
                raise yaml.constructor.ConstructorError(
                    "while constructing a mapping", node.start_mark,
                    f"found duplicate key {key!r}", key_node.start_mark)
            seen.add(key)
        return super().construct_mapping(node, deep=deep)


def _parse_json(text: str, source: Path) -> Any:
    try:
        return json.loads(text, object_pairs_hook=_reject_duplicates)
    except _DuplicateKey as e:
        raise ConfigError(f"{source}: duplicate key '{e.key}'", path=e.key) from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from None


def _parse_yaml(text: str, source: Path) -> Any:
    try:
        return yaml.load(text, Loader=_UniqueKeyLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        problem = getattr(e, "problem", None) or str(e)
        if mark is not None:
            raise ConfigError(f"{source}:{mark.line + 1}:{mark.column + 1}: {problem}") from None
        raise ConfigError(f"{source}: {problem}") from None


def load_config(path: Union[str, Path]) -> Config:
    """Load a JSON or YAML config file whose root is a mapping"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        tree = _parse_yaml(text, path)
    else:
        tree = _parse_json(text, path)
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: config root must be a mapping, got {type(tree).__name__}")
    logger.debug("loaded config %s", path)
    return Config(tree, source_path=path)


def _merge_trees(base: Dict[str, Any], override: Dict[str, Any], prefix: str) -> Dict[str, Any]:
    result = dict(base)
    for key, value in override.items():
        path = f"{prefix}.{key}" if prefix else key
        if key in result:
            current = result[key]
            if isinstance(current, dict) and isinstance(value, dict):
                result[key] = _merge_trees(current, value, path)
                continue
            if isinstance(current, dict) or isinstance(value, dict):
                raise ConfigError(
                    f"cannot merge {type(value).__name__} into {type(current).__name__} at '{path}'", path=path)
        result[key] = copy.deepcopy(value)
    return result


def merge_config(base: Union[Config, Mapping], override: Union[Config, Mapping]) -> Config:
    """Deep merge; override leaves win, lists are replaced wholesale"""
    base_cfg = base if isinstance(base, Config) else Config(base)
    override_cfg = override if isinstance(override, Config) else Config(override)
    merged = _merge_trees(base_cfg.to_dict(), override_cfg.to_dict(), "")
    return Config(merged, source_path=base_cfg.source_path)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items: Iterable[str]) -> Config:
    """Turn ["a.b=1", "c=x"] into an override Config"""
    tree: Dict[str, Any] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        path, raw = item.split("=", 1)
        segments = path.strip().split(".")
        if not all(segments):
            raise ConfigError(f"override '{item}' has an empty key segment")
        node = tree
        for depth, segment in enumerate(segments[:-1]):
            child = node.setdefault(segment, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override '{item}' conflicts with '{'.'.join(segments[:depth + 1])}'")
            node = child
        if isinstance(node.get(segments[-1]), dict):
            raise ConfigError(f"override '{item}' conflicts with a nested override", path=path)
        node[segments[-1]] = _parse_value(raw.strip())
    return Config(tree)


class Registry:
    """String-keyed map from component type names to builders"""

    def __init__(self, name: str):
        self.name = name
        self._entries: Dict[str, Callable[..., Any]] = {}

    def register(self, type_name: str, builder: Optional[Callable[..., Any]] = None):
        """Register a builder; without a builder, act as a decorator"""
        if builder is None:
            def decorator(fn):
                self.register(type_name, fn)
                return fn
            return decorator
        if not isinstance(type_name, str) or not type_name:
            raise RegistryError(f"{self.name}: type name must be a non-empty string")
        if type_name in self._entries:
            raise RegistryError(f"{self.name}: '{type_name}' is already registered")
        self._entries[type_name] = builder
        return builder

    def get(self, type_name: str) -> Callable[..., Any]:
        try:
            return self._entries[type_name]
        except KeyError:
            known = ", ".join(sorted(self._entries)) or "<empty>"
            raise RegistryError(
                f"'{type_name}' is not registered in {self.name} (known: {known})") from None

    def __contains__(self, type_name: str) -> bool:
        return type_name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return sorted(self._entries)

    def __repr__(self) -> str:
        return f"Registry(name={self.name!r}, entries={self.keys()})"


def register(reg: Registry, type_name: str, builder: Callable[..., Any]) -> None:
    reg.register(type_name, builder)


def _accepted_params(builder: Callable[..., Any]) -> Optional[set]:
    try:
        signature = inspect.signature(builder)
    except (TypeError, ValueError):
        return None
    params = signature.parameters.values()
    if any(p.kind is inspect.Parameter.VAR_KEYWORD for p in params):
        return None
    return {p.name for p in params}


def build_from_config(reg: Registry, cfg: Union[Config, Mapping], **defaults: Any) -> Any:
    """Build the component named by cfg['type'] from the remaining keys.

    ``defaults`` fill parameters the builder accepts and cfg leaves unset.
    """
    if not isinstance(cfg, (Config, Mapping)):
        raise ConfigError(f"{reg.name} entry must be a mapping, got {type(cfg).__name__}")
    params = _plain(cfg)
    if "type" not in params:
        raise ConfigError(f"missing 'type' key in {reg.name} entry", path="type")
    type_name = params.pop("type")
    builder = reg.get(type_name)
    if defaults:
        accepted = _accepted_params(builder)
        for key, value in defaults.items():
            if key not in params and (accepted is None or key in accepted):
                params[key] = value
    try:
        return builder(**params)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid parameters for {reg.name} type '{type_name}': {e}") from e


MODELS = Registry("MODELS")
BACKBONES = Registry("BACKBONES")
HEADS = Registry("HEADS")
DATASETS = Registry("DATASETS")
HOOKS = Registry("HOOKS")
