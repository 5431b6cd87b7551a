"""Tools for working with collection types and configuration mappings."""

import copy
import json
import logging
from collections import defaultdict
from collections.abc import Collection, Mapping, MutableMapping
from functools import partial
from pathlib import Path
from typing import Any, Callable, TypeAlias

import yaml

import mclab
from mclab.filesystem import path

log = logging.getLogger(__name__)


A: TypeAlias = Any
B: TypeAlias = Any
C: TypeAlias = Any
D: TypeAlias = Any

Index = int


class ConfigError(mclab.Error):
    """Raised for malformed or invalid configuration documents."""

    exit_code = 2


def buckets(
    col: Collection[A] | Collection[tuple[A, B]],
    key: Callable[[Index, A], tuple[B, C]] | None = None,
    mapper: Callable[[tuple[C, ...]], D] | None = None,
) -> dict[A, list[B]] | dict[A, list[C]] | dict[A, D]:
    """
    Sort data into buckets.

    Takes a collection and sorts the data into buckets based on a
    provided function. The resulting buckets can then optionally be
    mapped (e.g. to be reduced). Bucket order follows the order of
    first occurrence.

    Parameters
    ----------
    col : Collection[A] | Collection[tuple[B, C]]
        Collection to be partitioned
    key : Callable[[Index, A], tuple[B, C]] | None
        Optional function that returns (key, value) tuples
    mapper : Callable[[tuple[C]], D] | None
        Optional function that takes a bucket and maps it

    Returns
    -------
    Mapping[B, list[C]] | Mapping[B, D]
        A dictionary which maps bucket identifieres to their data

    Examples
    --------
    >>> from mclab.collections import buckets
    >>> rows = [("lwf", 0.84), ("tl", 0.57), ("lwf", 0.82)]
    >>> buckets(rows)
    {'lwf': [0.84, 0.82], 'tl': [0.57]}
    >>> buckets(rows, mapper=len)
    {'lwf': 2, 'tl': 1}

    """
    dic = defaultdict(list)

    for i, elem in enumerate(col):
        k, v = elem if key is None else key(i, elem)
        dic[k].append(v)

    if mapper:
        dic = {k: mapper(tuple(v)) for k, v in dic.items()}

    return dict(dic)


def dflat(
    dic,
    sep: str = ".",
    only: int | None = None,
):
    """
    Flatten a deep dictionary with string keys.

    Takes a deeply nested dictionary and flattens it by concatenating
    its keys using the provided separator. For example a dictionary
    d['train']['lr'] = 0.001 becomes d['train.lr'] = 0.001.

    Parameters
    ----------
    dic : Mapping[str, Any]
        The dictionary to be flattened
    sep : str
        Separator to concatenate the keys with
    only : int | None
        Stops flattening after the provided depth

    Examples
    --------
    >>> from mclab.collections import dflat
    >>> dflat(dict(train=dict(lr=0.001, seed=0), repeats=5))
    {'train.lr': 0.001, 'train.seed': 0, 'repeats': 5}

    """

    def descend(v, depth):
        if not isinstance(v, Mapping) or len(v) == 0:
            return False

        if (only is None) or (depth < only):
            return True

        return False

    def rec(src: Mapping, tar: MutableMapping, trail: list[str]):
        for k, v in src.items():
            subtrail = trail + [str(k)]
            if descend(v, len(subtrail)):
                rec(v, tar, subtrail)
            else:
                tar[sep.join(subtrail)] = v

        return tar

    return rec(dic, tar={}, trail=[])


def dmerge(*ds: dict) -> dict:
    """
    Deeply merge dictionaries.

    A new deep copy is created from the keys and values from the
    provided mappings. Values of the the next mapping overwrite the
    former unless they are set to None.

    Parameters
    ----------
    ds : Mapping
        Deep mappings to be merged

    Examples
    --------
    >>> from mclab.collections import dmerge
    >>> d1 = dict(train=dict(lr=0.001, seed=0), repeats=5)
    >>> d2 = dict(train=dict(seed=3), repeats=None)
    >>> dmerge(d1, d2)
    {'train': {'lr': 0.001, 'seed': 3}, 'repeats': 5}

    """
    if len(ds) == 0:
        return {}

    if len(ds) == 1:
        return copy.deepcopy(ds[0])

    work = list(ds)
    last = work.pop()

    curr = {}
    while work:
        curr = copy.deepcopy(work.pop())
        for k, v in last.items():
            if k in curr and v is None:
                continue

            if k not in curr or not isinstance(v, Mapping):
                curr[k] = copy.deepcopy(v)

            else:
                curr[k] = dmerge(curr[k] or {}, last[k])

        last = curr
    return curr


def _load(filepath: Path) -> dict:
    with filepath.open(mode="r") as fd:
        try:
            if filepath.suffix == ".json":
                loaded = json.load(fd)
            else:
                loaded = yaml.safe_load(fd)

        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{filepath}: malformed document: {exc}") from exc

    if loaded is None:
        return {}

    if not isinstance(loaded, dict):
        raise ConfigError(f"{filepath}: expected a mapping at the top level")

    return loaded


def rconf(*configs: Path | str, **overwrites) -> dict:
    """
    Load and join configurations from json or yaml files and kwargs.

    First, all provided configuration files are loaded
    and joined together. Afterwards, all provided kwargs
    overwrite the joined configuration dict.

    Parameters
    ----------
    *configs : Path | str
        Config files to be read and merged (.json, .yaml or .yml)
    **overwrites : Any
        To overwrite loaded values

    Raises
    ------
    ConfigError
        If a document cannot be parsed or is not a mapping

    """
    as_path = partial(path, is_file=True)

    # later dictionaries overwrite earlier ones
    loaded = [_load(filepath) for filepath in map(as_path, configs)]
    log.debug(f"collections: loaded {len(loaded)} configuration documents")

    work = loaded + [overwrites]
    return dmerge(*work)


def take(
    dic: Mapping[str, Any],
    fields: Mapping[str, type | tuple[type, ...]],
    where: str,
    defaults: Mapping[str, Any] | None = None,
    error: type[ConfigError] = ConfigError,
) -> dict[str, Any]:
    """
    Validate a flat configuration mapping against expected fields.

    Unknown keys, missing keys without default and values of the
    wrong type are rejected with an error naming the field.

    Parameters
    ----------
    dic : Mapping[str, Any]
        The raw mapping, e.g. parsed json
    fields : Mapping[str, type | tuple[type, ...]]
        Expected field names and their accepted types
    where : str
        Name of the document for error messages
    defaults : Mapping[str, Any] | None
        Values used for absent fields
    error : type[ConfigError]
        Raised on violations, e.g. a more specific subclass

    Returns
    -------
    dict[str, Any]
        Validated values for all fields

    Raises
    ------
    ConfigError
        Or the provided subclass, naming the offending field

    Examples
    --------
    >>> from mclab.collections import take
    >>> take({"lr": 0.01}, {"lr": float, "seed": int}, "train", {"seed": 0})
    {'lr': 0.01, 'seed': 0}

    """
    defaults = defaults or {}

    unknown = set(dic) - set(fields)
    if unknown:
        raise error(f"{where}: unknown field(s) {sorted(unknown)}")

    res = {}
    for name, types in fields.items():
        if name not in dic:
            if name not in defaults:
                raise error(f"{where}: missing field '{name}'")
            res[name] = defaults[name]
            continue

        value = dic[name]
        accepted = types if isinstance(types, tuple) else (types,)

        if isinstance(value, bool) and bool not in accepted:
            raise error(f"{where}: field '{name}' must not be a boolean")

        # json has no int/float distinction worth rejecting
        if float in accepted and isinstance(value, int):
            value = float(value)

        if not isinstance(value, accepted):
            names = "/".join(t.__name__ for t in accepted)
            raise error(
                f"{where}: field '{name}' expected {names}, got {type(value).__name__}"
            )

        res[name] = value

    return res
