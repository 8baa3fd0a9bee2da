"""Binary checkpoint format with bit-exact round trips.

Layout (all integers little-endian u32 unless noted):

    magic "RGAG" | version | digest_len + digest utf8 | n_params |
    per param: name_len + name utf8 | dtype code u8 (0=f32, 1=f64) |
               ndim | dims... | raw little-endian float bytes

The digest identifies the model configuration (plus vocabulary) so weights
cannot be loaded under a mismatched architecture.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor, parameter
from .errors import ParseError

MAGIC = b"RGAG"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, params: dict[str, Tensor], config_digest: str) -> None:
    """Write atomically (write-then-rename) so interruptions leave no torn file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    digest_bytes = config_digest.encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(digest_bytes)))
        fh.write(digest_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = params[name].data
            code = _CODE_OF[np.dtype(arr.dtype)]
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", code))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, Tensor], str]:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if view[:4] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file (bad magic)")
    offset = 4

    def read_u32() -> int:
        nonlocal offset
        (value,) = struct.unpack_from("<I", view, offset)
        offset += 4
        return value

    version = read_u32()
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    digest_len = read_u32()
    digest = bytes(view[offset : offset + digest_len]).decode("utf-8")
    offset += digest_len
    n_params = read_u32()
    params: dict[str, Tensor] = {}
    for _ in range(n_params):
        name_len = read_u32()
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        (code,) = struct.unpack_from("<B", view, offset)
        offset += 1
        if code not in _DTYPE_CODES:
            raise ParseError(f"{path}: unknown dtype code {code} for {name!r}")
        ndim = read_u32()
        shape = struct.unpack_from(f"<{ndim}I", view, offset)
        offset += 4 * ndim
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(view, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        offset += nbytes
        params[name] = parameter(arr.reshape(shape).copy(), name=name)
    return params, digest
