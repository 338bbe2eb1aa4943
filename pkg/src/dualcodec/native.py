"""Optional native range coder: auto-detected, byte-identical, never required.

The accelerator is a cdylib built from the `native/` crate; this shim loads
it via ctypes and mirrors the reference coder signatures. When the library
is absent every entry point reports unavailable and callers fall back to the
pure-Python coder.
"""

from __future__ import annotations

import ctypes
import os
from pathlib import Path

import numpy as np

from .errors import ContractError, DecodeError, TruncatedStreamError
from .rangecoder import CodedSymbols

_LIB_BASENAMES = ("libdualcodec_rc.so", "libdualcodec_rc.dylib", "dualcodec_rc.dll")


def _candidate_paths():
    env = os.environ.get("DUALCODEC_NATIVE_LIB")
    if env in ("0", "off"):
        return  # explicit opt-out: stay on the reference coder
    if env:
        yield Path(env)
    here = Path(__file__).resolve().parent  # .../src/dualcodec
    repo_root = here.parent.parent
    for base in _LIB_BASENAMES:
        yield here / base
        yield repo_root / "native" / "target" / "release" / base


_lib = None
_load_attempted = False


def _load():
    global _lib, _load_attempted
    if _load_attempted:
        return _lib
    _load_attempted = True
    for path in _candidate_paths():
        if path.is_file():
            try:
                lib = ctypes.CDLL(str(path))
            except OSError:
                continue
            lib.rc_encode.restype = ctypes.c_int64
            lib.rc_encode.argtypes = [
                ctypes.POINTER(ctypes.c_int64), ctypes.POINTER(ctypes.c_uint32),
                ctypes.c_size_t,
                ctypes.POINTER(ctypes.c_uint32), ctypes.POINTER(ctypes.c_uint32),
                ctypes.POINTER(ctypes.c_uint32), ctypes.c_size_t,
                ctypes.POINTER(ctypes.c_uint8), ctypes.c_size_t,
            ]
            lib.rc_decode.restype = ctypes.c_int64
            lib.rc_decode.argtypes = [
                ctypes.POINTER(ctypes.c_uint8), ctypes.c_size_t,
                ctypes.POINTER(ctypes.c_uint32), ctypes.c_size_t,
                ctypes.POINTER(ctypes.c_uint32), ctypes.POINTER(ctypes.c_uint32),
                ctypes.POINTER(ctypes.c_uint32), ctypes.c_size_t,
                ctypes.POINTER(ctypes.c_int64),
            ]
            _lib = lib
            break
    return _lib


def available() -> bool:
    return _load() is not None


def _flatten_tables(cdfs):
    starts, lens, chunks = [], [], []
    pos = 0
    for c in cdfs:
        arr = np.ascontiguousarray(c, dtype=np.uint32)
        starts.append(pos)
        lens.append(len(arr))
        chunks.append(arr)
        pos += len(arr)
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint32)
    return (flat,
            np.asarray(starts, dtype=np.uint32),
            np.asarray(lens, dtype=np.uint32))


def _u32p(a):
    return a.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32))


def range_encode(coded: CodedSymbols, cdfs) -> bytes:
    lib = _load()
    if lib is None:
        raise ContractError("native coder not available")
    symbols = np.ascontiguousarray(coded.symbols, dtype=np.int64)
    ids = np.ascontiguousarray(coded.cdf_ids, dtype=np.uint32)
    flat, starts, lens = _flatten_tables(cdfs)
    cap = 2 * len(symbols) + 64
    out = np.zeros(cap, dtype=np.uint8)
    n = lib.rc_encode(
        symbols.ctypes.data_as(ctypes.POINTER(ctypes.c_int64)), _u32p(ids),
        len(symbols), _u32p(flat), _u32p(starts), _u32p(lens), len(lens),
        out.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)), cap)
    if n < 0:
        raise ContractError(f"native encoder rejected input (code {n})")
    return bytes(out[:n].tobytes())


def range_decode(data: bytes, cdfs, cdf_ids) -> CodedSymbols:
    lib = _load()
    if lib is None:
        raise ContractError("native coder not available")
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    ids = np.ascontiguousarray(cdf_ids, dtype=np.uint32)
    flat, starts, lens = _flatten_tables(cdfs)
    out = np.zeros(len(ids), dtype=np.int64)
    rc = lib.rc_decode(
        buf.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)), len(buf),
        _u32p(ids), len(ids), _u32p(flat), _u32p(starts), _u32p(lens), len(lens),
        out.ctypes.data_as(ctypes.POINTER(ctypes.c_int64)))
    if rc == -3:
        raise TruncatedStreamError("native decoder: payload ended early", len(buf))
    if rc < 0:
        raise DecodeError(f"native decoder rejected input (code {rc})", 0)
    return CodedSymbols(out, np.asarray(cdf_ids, dtype=np.int64))
