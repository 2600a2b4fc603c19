"""Minimal single-file NIfTI-1 reader and writer.

Supports the subset needed for diffusion MRI volumes and masks: 348-byte
little-endian header (byteswapped files are accepted too), magic ``n+1``,
uint8/int16/int32/float32/float64 data, scl_slope/scl_inter scaling and
sform/qform affines. Gzip compression is detected from the first two bytes
of the file, not the extension.
"""

import gzip
import struct

import numpy as np

from .errors import FormatError

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# NIfTI-1 datatype code -> numpy dtype (unscaled, endian applied separately)
_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
_DTYPE_CODES = {np.dtype("f4"): (16, 32), np.dtype("f8"): (64, 64),
                np.dtype("u1"): (2, 8), np.dtype("i2"): (4, 16),
                np.dtype("i4"): (8, 32)}


def _read_raw(path):
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == GZIP_MAGIC:
            with gzip.GzipFile(fileobj=f) as g:
                return g.read()
        return f.read()


def _quaternion_affine(hdr, voxel_size):
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a = max(0.0, 1.0 - b * b - c * c - d * d) ** 0.5
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    scale = np.array([voxel_size[0], voxel_size[1], qfac * voxel_size[2]])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def _parse_header(raw):
    if len(raw) < HEADER_SIZE:
        raise FormatError("file too short for a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise FormatError("not a NIfTI-1 file (bad sizeof_hdr)")
    if raw[344:348] != MAGIC_SINGLE:
        raise FormatError("unsupported NIfTI magic %r (only single-file n+1)"
                          % raw[344:348])

    def unpack(fmt, offset):
        return struct.unpack_from(endian + fmt, raw, offset)

    hdr = {
        "dim": unpack("8h", 40),
        "datatype": unpack("h", 70)[0],
        "pixdim": unpack("8f", 76),
        "vox_offset": unpack("f", 108)[0],
        "scl_slope": unpack("f", 112)[0],
        "scl_inter": unpack("f", 116)[0],
        "qform_code": unpack("h", 252)[0],
        "sform_code": unpack("h", 254)[0],
        "quatern_b": unpack("f", 256)[0],
        "quatern_c": unpack("f", 260)[0],
        "quatern_d": unpack("f", 264)[0],
        "qoffset_x": unpack("f", 268)[0],
        "qoffset_y": unpack("f", 272)[0],
        "qoffset_z": unpack("f", 276)[0],
        "srow": np.array([unpack("4f", 280), unpack("4f", 296),
                          unpack("4f", 312)], dtype=np.float64),
        "endian": endian,
    }
    return hdr


def read_nifti(path):
    """Read a (optionally gzipped) NIfTI-1 file.

    Returns
    -------
    data : float64 ndarray, scl_slope/scl_inter applied when slope != 0
    affine : (4, 4) float64 voxel-to-world matrix
    voxel_size : (3,) float64, from pixdim
    """
    raw = _read_raw(path)
    hdr = _parse_header(raw)

    ndim = hdr["dim"][0]
    if not 1 <= ndim <= 7:
        raise FormatError("invalid dim[0] = %d" % ndim)
    shape = tuple(int(n) for n in hdr["dim"][1:1 + ndim])
    if any(n < 1 for n in shape):
        raise FormatError("non-positive dimension in header: %s" % (shape,))
    if hdr["datatype"] not in _DTYPES:
        raise FormatError("unsupported datatype code %d" % hdr["datatype"])
    dtype = np.dtype(hdr["endian"] + _DTYPES[hdr["datatype"]])

    offset = int(round(hdr["vox_offset"]))
    if offset < HEADER_SIZE:
        offset = HEADER_SIZE + 4
    count = int(np.prod(shape))
    if offset + count * dtype.itemsize > len(raw):
        raise FormatError("file truncated: header promises %d voxels" % count)
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        data = data * slope + inter

    voxel_size = np.abs(np.asarray(hdr["pixdim"][1:4], dtype=np.float64))
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3, :] = hdr["srow"]
    elif hdr["qform_code"] > 0:
        affine = _quaternion_affine(hdr, voxel_size)
    else:
        affine = np.diag([voxel_size[0], voxel_size[1], voxel_size[2], 1.0])
    return data, affine, voxel_size


def write_nifti(path, data, affine, voxel_size=None, dtype=np.float32):
    """Write ``data`` as a single-file NIfTI-1 (gzipped when path ends in .gz).

    The affine is stored in the sform rows (code 2); data is stored in
    Fortran order. Output bytes are deterministic (gzip mtime pinned to 0).
    """
    data = np.asarray(data)
    if not 1 <= data.ndim <= 7:
        raise FormatError("cannot store %d-dimensional data" % data.ndim)
    dtype = np.dtype(dtype).newbyteorder("<")
    if dtype.newbyteorder("=") not in _DTYPE_CODES:
        raise FormatError("unsupported storage dtype %s" % dtype)
    code, bitpix = _DTYPE_CODES[dtype.newbyteorder("=")]
    affine = np.asarray(affine, dtype=np.float64)
    if voxel_size is None:
        voxel_size = np.sqrt((affine[:3, :3] ** 2).sum(axis=0))

    hdr = bytearray(HEADER_SIZE + 4)  # +4: no-extension flag
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    pixdim = [1.0, float(voxel_size[0]), float(voxel_size[1]),
              float(voxel_size[2])] + [1.0] * 4
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<h", hdr, 252, 0)    # qform_code
    struct.pack_into("<h", hdr, 254, 2)    # sform_code
    struct.pack_into("<4f", hdr, 280, *affine[0, :])
    struct.pack_into("<4f", hdr, 296, *affine[1, :])
    struct.pack_into("<4f", hdr, 312, *affine[2, :])
    hdr[344:348] = MAGIC_SINGLE

    payload = bytes(hdr) + data.astype(dtype).tobytes(order="F")
    path = str(path)
    if path.endswith(".gz"):
        with open(path, "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as g:
                g.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)
