# -*- coding: utf-8 -*-

import hashlib
import tempfile
from pathlib import Path

import pytest

import mclab
from mclab import filesystem as fs


class TestPath:
    def test_path(self):
        path = fs.path("foo")
        assert isinstance(path, Path)
        assert not path.exists()

        with tempfile.NamedTemporaryFile() as fd:
            path = fs.path(fd.name)
            assert path.exists()

    def test_path_exists(self):
        with tempfile.NamedTemporaryFile() as fd:
            path = fs.path(fd.name, exists=True)
            assert path.exists()

        with tempfile.TemporaryDirectory() as name:
            path = fs.path(name, exists=True)
            assert path.exists()

        with pytest.raises(fs.FileError):
            fs.path("foo", exists=True)

    def test_path_is_file(self):
        with pytest.raises(fs.FileError):
            fs.path("foo", is_file=True)

        with tempfile.NamedTemporaryFile() as fd:
            assert fs.path(fd.name, is_file=True)

        with pytest.raises(fs.FileError):
            with tempfile.TemporaryDirectory() as name:
                fs.path(name, is_file=True)

    def test_path_is_dir(self):
        with pytest.raises(fs.FileError):
            fs.path("foo", is_dir=True)

        with tempfile.TemporaryDirectory() as tmpdir:
            assert fs.path(tmpdir, is_dir=True)

        with pytest.raises(fs.FileError):
            with tempfile.NamedTemporaryFile() as fd:
                fs.path(fd.name, is_dir=True)

    def test_path_create(self):
        with tempfile.TemporaryDirectory() as prefix:
            dirpath = Path(prefix) / "foo" / "bar"
            assert not dirpath.exists()

            path = fs.path(dirpath, create=True)
            assert path.exists() and path.is_dir()

    def test_error_exit_code(self):
        with pytest.raises(mclab.Error) as info:
            fs.path("foo", exists=True)

        assert info.value.exit_code == 3


class TestAtomicWrite:
    def test_binary(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            target = Path(tmpdir) / "sub" / "file.bin"
            with fs.atomic_write(target) as fd:
                fd.write(b"MCKP")

            assert target.read_bytes() == b"MCKP"

    def test_text(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            target = Path(tmpdir) / "file.txt"
            with fs.atomic_write(target, mode="w") as fd:
                fd.write("hello")

            assert target.read_text() == "hello"

    def test_replace(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            target = Path(tmpdir) / "file.txt"
            target.write_text("old")

            with fs.atomic_write(target, mode="w") as fd:
                fd.write("new")

            assert target.read_text() == "new"
            assert [p.name for p in Path(tmpdir).iterdir()] == ["file.txt"]

    def test_failure_keeps_target(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            target = Path(tmpdir) / "file.txt"
            target.write_text("old")

            with pytest.raises(RuntimeError):
                with fs.atomic_write(target, mode="w") as fd:
                    fd.write("partial")
                    raise RuntimeError("interrupted")

            assert target.read_text() == "old"
            assert [p.name for p in Path(tmpdir).iterdir()] == ["file.txt"]


class TestFileDigest:
    def test_digest(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            target = Path(tmpdir) / "file.bin"
            target.write_bytes(b"abc")

            assert fs.file_digest(target) == hashlib.sha256(b"abc").hexdigest()

    def test_missing(self):
        with pytest.raises(fs.FileError):
            fs.file_digest("does-not-exist.bin")
