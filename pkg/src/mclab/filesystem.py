# -*- coding: utf-8 -*-

"""Things to do with the filesystem."""

import hashlib
import logging
import os
import pathlib
import tempfile
from contextlib import contextmanager
from typing import IO, Iterator

import mclab

log = logging.getLogger(__name__)


class FileError(mclab.Error):
    """Raised for missing, unreadable or unwritable paths."""

    exit_code = 3


def path(
    name: str | pathlib.Path,
    create: bool = False,
    exists: bool = False,
    is_dir: bool | None = None,
    is_file: bool | None = None,
) -> pathlib.Path:
    """
    Create paths.

    This simply gathers usual operations on Path objects for which
    normally multiple calls to the pathlib are required.

    Parameters
    ----------
    name : str | pathlib.Path
        The path in question
    create : bool
        Whether to create a directory if it does not exist
    exists : bool
        Check if the path exists, otherwise raise
    is_dir : bool | None
        Check if path is a directory, otherwise raise
    is_file : bool | None
        Check if path is a file, otherwise raise

    Returns
    -------
    pathlib.Path
        A Path instance

    Raises
    ------
    FileError
        Raised if any of the constraints are violated

    Examples
    --------
    >>> from mclab.filesystem import path
    >>> somedir = path('runs/interior', create=True)
    >>> path(somedir, is_file=True)
    Traceback (most recent call last):
      (...)
    FileError: runs/interior exists but is not a file

    """
    path = pathlib.Path(name)

    if (exists or is_file or is_dir) and not path.exists():
        raise FileError(f"{path} does not exist")

    if is_file and not path.is_file():
        raise FileError(f"{path} exists but is not a file")

    if is_dir and not path.is_dir():
        raise FileError(f"{path} exists but is not a directory")

    if create:
        try:
            path.mkdir(exist_ok=True, parents=True)
        except OSError as exc:
            raise FileError(f"cannot create {path}: {exc}") from exc

    return path


@contextmanager
def atomic_write(
    target: str | pathlib.Path,
    mode: str = "wb",
) -> Iterator[IO]:
    """
    Write a file atomically.

    The content is written to a temporary file in the target's
    directory which replaces the target only after the context
    exited without error. Readers never observe partial files.

    Parameters
    ----------
    target : str | pathlib.Path
        Final location of the file
    mode : str
        Either "wb" or "w"

    Examples
    --------
    >>> from mclab.filesystem import atomic_write
    >>> with atomic_write("model.mckp") as fd:
    ...     fd.write(b"MCKP")

    """
    assert mode in {"wb", "w"}, "atomic_write only supports write modes"

    target = pathlib.Path(target)
    parent = path(target.parent, create=True)

    fd, tmpname = tempfile.mkstemp(prefix=f".{target.name}.", dir=parent)
    try:
        encoding = None if "b" in mode else "utf-8"
        with os.fdopen(fd, mode=mode, encoding=encoding) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())

        os.replace(tmpname, target)

    except OSError as exc:
        pathlib.Path(tmpname).unlink(missing_ok=True)
        raise FileError(f"cannot write {target}: {exc}") from exc

    except BaseException:
        pathlib.Path(tmpname).unlink(missing_ok=True)
        raise

    log.debug(f"filesystem: wrote {target}")


def file_digest(name: str | pathlib.Path) -> str:
    """
    Produce the sha256 hex digest of a file.

    Parameters
    ----------
    name : str | pathlib.Path
        File to be hashed

    Returns
    -------
    str
        Hex digest of the file content

    """
    digest = hashlib.sha256()
    with path(name, is_file=True).open(mode="rb") as fd:
        for chunk in iter(lambda: fd.read(1 << 20), b""):
            digest.update(chunk)

    return digest.hexdigest()
