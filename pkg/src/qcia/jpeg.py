"""Baseline sequential JPEG (JFIF) encoder and decoder.

The encoder is deliberately narrow: Annex-K quantisation and Huffman tables,
IJG quality scaling, 4:2:0 chroma subsampling for colour input, a single
interleaved scan and no restart markers. The decoder accepts any baseline
Huffman stream, including restart intervals and non-interleaved scans.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptStream, QualityOutOfRange, UnsupportedFormat
from .imageio import Raster

# Annex K.1 tables, natural (row-major) order.
STD_LUMINANCE_QT = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

STD_CHROMINANCE_QT = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)

# ZIGZAG[k] is the natural-order index of the k-th zigzag coefficient.
ZIGZAG = np.array([
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5,
    12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6, 7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
], dtype=np.intp)

# Annex K.3 Huffman tables: (BITS[1..16], HUFFVAL)
DC_LUMINANCE = (
    [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
    list(range(12)),
)
DC_CHROMINANCE = (
    [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0],
    list(range(12)),
)
AC_LUMINANCE = (
    [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D],
    [
        0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
        0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0,
        0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
        0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
        0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
        0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
        0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7,
        0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5,
        0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
        0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
        0xF9, 0xFA,
    ],
)
AC_CHROMINANCE = (
    [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77],
    [
        0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
        0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0,
        0x15, 0x62, 0x72, 0xD1, 0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26,
        0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
        0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
        0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
        0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5,
        0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3,
        0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA,
        0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
        0xF9, 0xFA,
    ],
)


def _dct_matrix() -> np.ndarray:
    k = np.arange(8)
    c = np.sqrt(2.0 / 8.0) * np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / 16.0)
    c[0, :] = np.sqrt(1.0 / 8.0)
    return c


_DCT = _dct_matrix()


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True, eq=False)
class QuantTable:
    """8x8 quantisation table with entries in [1, 255]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64)
        if v.shape != (8, 8):
            raise ValueError(f"quant table must be 8x8, got {v.shape}")
        if v.min() < 1 or v.max() > 255:
            raise ValueError("quant table entries must lie in [1, 255]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __eq__(self, other):
        return isinstance(other, QuantTable) and np.array_equal(self.values, other.values)


LUMINANCE = QuantTable(STD_LUMINANCE_QT)
CHROMINANCE = QuantTable(STD_CHROMINANCE_QT)


def quality_scale(q: int) -> int:
    if not 1 <= q <= 100:
        raise QualityOutOfRange(f"quality must be in 1..100, got {q}")
    return 5000 // q if q < 50 else 200 - 2 * q


def jpeg_quant_table(base: QuantTable, q: int) -> QuantTable:
    """IJG quality scaling of ``base`` to quality ``q``."""
    s = quality_scale(int(q))
    return QuantTable(np.clip((base.values * s + 50) // 100, 1, 255))


# ------------------------------------------------------------ huffman ----

def huffman_codes(bits, vals) -> dict[int, tuple[int, int]]:
    """Canonical code assignment (Annex C): symbol -> (code, length)."""
    codes = {}
    code = 0
    k = 0
    for length in range(1, 17):
        for _ in range(bits[length - 1]):
            codes[vals[k]] = (code, length)
            code += 1
            k += 1
        code <<= 1
    return codes


class _BitWriter:
    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, code: int, length: int):
        self.acc = (self.acc << length) | code
        self.nbits += length
        while self.nbits >= 8:
            self.nbits -= 8
            byte = (self.acc >> self.nbits) & 0xFF
            self.out.append(byte)
            if byte == 0xFF:
                self.out.append(0x00)
        self.acc &= (1 << self.nbits) - 1

    def flush(self) -> bytes:
        if self.nbits:
            pad = 8 - self.nbits
            self.write((1 << pad) - 1, pad)
        return bytes(self.out)


def _magnitude(v: int) -> tuple[int, int]:
    cat = abs(v).bit_length()
    bits = v if v >= 0 else v + (1 << cat) - 1
    return cat, bits


# ------------------------------------------------------------- encode ----

def _rgb_to_ycbcr(px: np.ndarray) -> np.ndarray:
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def _ycbcr_to_rgb(px: np.ndarray) -> np.ndarray:
    y, cb, cr = px[..., 0], px[..., 1] - 128.0, px[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _pad_to(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = h - plane.shape[0], w - plane.shape[1]
    if ph == 0 and pw == 0:
        return plane
    return np.pad(plane, ((0, ph), (0, pw)), mode="edge")


def _forward_blocks(plane: np.ndarray, table: QuantTable) -> np.ndarray:
    """Level-shift, DCT and quantise; returns (rows, cols, 64) zigzag ints."""
    h, w = plane.shape
    blocks = (plane - 128.0).reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    coef = _DCT @ blocks @ _DCT.T
    q = round_half_away(coef / table.values).astype(np.int64)
    return q.reshape(h // 8, w // 8, 64)[:, :, ZIGZAG]


def _encode_block(writer, zz, pred, dc_codes, ac_codes) -> int:
    dc = zz[0]
    cat, bits = _magnitude(dc - pred)
    code, length = dc_codes[cat]
    writer.write(code, length)
    if cat:
        writer.write(bits, cat)
    run = 0
    last_nz = 0
    for k in range(63, 0, -1):
        if zz[k]:
            last_nz = k
            break
    for k in range(1, last_nz + 1):
        v = zz[k]
        if v == 0:
            run += 1
            continue
        while run > 15:
            code, length = ac_codes[0xF0]
            writer.write(code, length)
            run -= 16
        cat, bits = _magnitude(v)
        code, length = ac_codes[(run << 4) | cat]
        writer.write(code, length)
        writer.write(bits, cat)
        run = 0
    if last_nz < 63:
        code, length = ac_codes[0x00]
        writer.write(code, length)
    return dc


def _segment(marker: int, payload: bytes) -> bytes:
    return struct.pack(">BBH", 0xFF, marker, len(payload) + 2) + payload


def jpeg_encode(r: Raster, q: int) -> bytes:
    """Encode a raster as a baseline JFIF stream at IJG quality ``q``."""
    q = int(q)
    lum = jpeg_quant_table(LUMINANCE, q)
    chrom = jpeg_quant_table(CHROMINANCE, q)
    h, w = r.height, r.width
    px = r.pixels.astype(np.float64)
    color = r.channels == 3

    if color:
        ycc = _rgb_to_ycbcr(px)
        mh, mw = -(-h // 16) * 16, -(-w // 16) * 16
        y = _pad_to(ycc[..., 0], mh, mw)
        chroma = []
        for c in (1, 2):
            plane = _pad_to(ycc[..., c], mh, mw)
            chroma.append(plane.reshape(mh // 2, 2, mw // 2, 2).mean(axis=(1, 3)))
        comps = [
            _forward_blocks(y, lum),
            _forward_blocks(chroma[0], chrom),
            _forward_blocks(chroma[1], chrom),
        ]
        sampling = [(2, 2), (1, 1), (1, 1)]
        tables = [0, 1, 1]
    else:
        mh, mw = -(-h // 8) * 8, -(-w // 8) * 8
        comps = [_forward_blocks(_pad_to(px[..., 0], mh, mw), lum)]
        sampling = [(1, 1)]
        tables = [0]

    out = bytearray(b"\xff\xd8")
    out += _segment(0xE0, b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00")
    out += _segment(0xDB, bytes([0x00]) + bytes(lum.values.ravel()[ZIGZAG].tolist()))
    if color:
        out += _segment(0xDB, bytes([0x01]) + bytes(chrom.values.ravel()[ZIGZAG].tolist()))
    sof = struct.pack(">BHHB", 8, h, w, len(comps))
    for cid, ((hs, vs), tq) in enumerate(zip(sampling, tables), start=1):
        sof += struct.pack(">BBB", cid, (hs << 4) | vs, tq)
    out += _segment(0xC0, sof)
    huff = [(0x00, DC_LUMINANCE), (0x10, AC_LUMINANCE)]
    if color:
        huff += [(0x01, DC_CHROMINANCE), (0x11, AC_CHROMINANCE)]
    for tc_th, (bits, vals) in huff:
        out += _segment(0xC4, bytes([tc_th]) + bytes(bits) + bytes(vals))
    sos = bytes([len(comps)])
    for cid, tq in enumerate(tables, start=1):
        sos += bytes([cid, (tq << 4) | tq])
    sos += bytes([0, 63, 0])
    out += _segment(0xDA, sos)

    dc_tabs = [huffman_codes(*DC_LUMINANCE), huffman_codes(*DC_CHROMINANCE)]
    ac_tabs = [huffman_codes(*AC_LUMINANCE), huffman_codes(*AC_CHROMINANCE)]
    writer = _BitWriter()
    preds = [0] * len(comps)
    blocks = [c.tolist() for c in comps]
    mcu_rows = len(blocks[0]) // sampling[0][1]
    mcu_cols = len(blocks[0][0]) // sampling[0][0]
    for my in range(mcu_rows):
        for mx in range(mcu_cols):
            for ci, (hs, vs) in enumerate(sampling):
                t = tables[ci]
                for by in range(vs):
                    row = blocks[ci][my * vs + by]
                    for bx in range(hs):
                        preds[ci] = _encode_block(
                            writer, row[mx * hs + bx], preds[ci], dc_tabs[t], ac_tabs[t]
                        )
    out += writer.flush()
    out += b"\xff\xd9"
    return bytes(out)


# ------------------------------------------------------------- decode ----

class _Huffman:
    """16-bit lookahead decode table."""

    def __init__(self, bits, vals):
        if sum(bits) != len(vals):
            raise CorruptStream("Huffman table value count mismatch")
        sym = [0] * 65536
        size = [0] * 65536
        for s, (code, length) in huffman_codes(bits, vals).items():
            if length > 16 or code >= (1 << length):
                raise CorruptStream("invalid Huffman table")
            lo = code << (16 - length)
            hi = (code + 1) << (16 - length)
            sym[lo:hi] = [s] * (hi - lo)
            size[lo:hi] = [length] * (hi - lo)
        self.sym = sym
        self.size = size


class _BitReader:
    def __init__(self, data: bytes):
        self.data = bytes(data) + b"\xff" * 4
        self.limit = len(data) * 8
        self.pos = 0

    def peek16(self) -> int:
        p = self.pos
        i = p >> 3
        d = self.data
        word = (d[i] << 16) | (d[i + 1] << 8) | d[i + 2]
        return (word >> (8 - (p & 7))) & 0xFFFF

    def bits(self, n: int) -> int:
        if n == 0:
            return 0
        p = self.pos
        i = p >> 3
        d = self.data
        word = (d[i] << 24) | (d[i + 1] << 16) | (d[i + 2] << 8) | d[i + 3]
        self.pos = p + n
        if self.pos > self.limit + 16:
            raise CorruptStream("entropy-coded data truncated")
        return (word >> (32 - (p & 7) - n)) & ((1 << n) - 1)

    def decode(self, table: _Huffman) -> int:
        w = self.peek16()
        length = table.size[w]
        if length == 0:
            raise CorruptStream("invalid Huffman code")
        self.pos += length
        if self.pos > self.limit + 16:
            raise CorruptStream("entropy-coded data truncated")
        return table.sym[w]


def _extend(v: int, t: int) -> int:
    return v - (1 << t) + 1 if t and v < (1 << (t - 1)) else v


@dataclass
class _Component:
    cid: int
    h: int
    v: int
    tq: int
    td: int = 0
    ta: int = 0
    coef: np.ndarray | None = None
    pred: int = 0


def _unstuff(data: bytes, start: int):
    """Split entropy-coded bytes at RSTn markers; return (segments, end)."""
    segments = []
    cur = bytearray()
    i = start
    n = len(data)
    while True:
        j = data.find(b"\xff", i)
        if j < 0 or j + 1 >= n:
            raise CorruptStream("scan data not terminated by a marker")
        cur += data[i:j]
        nxt = data[j + 1]
        if nxt == 0x00:
            cur.append(0xFF)
            i = j + 2
        elif 0xD0 <= nxt <= 0xD7:
            segments.append(bytes(cur))
            cur = bytearray()
            i = j + 2
        elif nxt == 0xFF:
            i = j + 1
        else:
            segments.append(bytes(cur))
            return segments, j


def jpeg_decode(data: bytes) -> Raster:
    """Decode a baseline sequential JPEG stream."""
    if len(data) < 4 or data[:2] != b"\xff\xd8":
        raise CorruptStream("missing SOI marker")
    qt: dict[int, np.ndarray] = {}
    dc_tabs: dict[int, _Huffman] = {}
    ac_tabs: dict[int, _Huffman] = {}
    comps: list[_Component] = []
    width = height = 0
    restart = 0
    seen_eoi = False
    i = 2
    n = len(data)
    while i < n:
        if data[i] != 0xFF:
            raise CorruptStream(f"expected marker at offset {i}")
        marker = data[i + 1] if i + 1 < n else None
        if marker is None:
            raise CorruptStream("truncated marker")
        if marker == 0xFF:
            i += 1
            continue
        if marker == 0xD9:
            seen_eoi = True
            break
        if i + 4 > n:
            raise CorruptStream("truncated segment header")
        (length,) = struct.unpack(">H", data[i + 2:i + 4])
        seg = data[i + 4:i + 2 + length]
        if len(seg) != length - 2 or length < 2:
            raise CorruptStream(f"truncated segment 0x{marker:02X}")
        i += 2 + length

        if marker == 0xDB:
            k = 0
            while k < len(seg):
                pq, tq = seg[k] >> 4, seg[k] & 15
                size = 128 if pq else 64
                raw = seg[k + 1:k + 1 + size]
                if len(raw) != size:
                    raise CorruptStream("truncated DQT")
                vals = np.frombuffer(raw, dtype=">u2" if pq else np.uint8).astype(np.int64)
                table = np.zeros(64, dtype=np.int64)
                table[ZIGZAG] = vals
                qt[tq] = table.reshape(8, 8)
                k += 1 + size
        elif marker == 0xC4:
            k = 0
            while k < len(seg):
                tc, th = seg[k] >> 4, seg[k] & 15
                bits = list(seg[k + 1:k + 17])
                if len(bits) != 16:
                    raise CorruptStream("truncated DHT")
                total = sum(bits)
                vals = list(seg[k + 17:k + 17 + total])
                if len(vals) != total:
                    raise CorruptStream("truncated DHT")
                (ac_tabs if tc else dc_tabs)[th] = _Huffman(bits, vals)
                k += 17 + total
        elif marker in (0xC0, 0xC1):
            if len(seg) < 6:
                raise CorruptStream("truncated SOF")
            precision, height, width, nf = struct.unpack(">BHHB", seg[:6])
            if precision != 8:
                raise UnsupportedFormat(f"{precision}-bit samples are not supported")
            if nf not in (1, 3) or len(seg) < 6 + 3 * nf:
                raise UnsupportedFormat(f"{nf} components are not supported")
            if width == 0 or height == 0:
                raise UnsupportedFormat("DNL-defined heights are not supported")
            comps = []
            for c in range(nf):
                cid, hv, tq = seg[6 + 3 * c:9 + 3 * c]
                if not (1 <= hv >> 4 <= 4 and 1 <= hv & 15 <= 4):
                    raise CorruptStream("invalid sampling factors")
                comps.append(_Component(cid, hv >> 4, hv & 15, tq))
            hmax = max(c.h for c in comps)
            vmax = max(c.v for c in comps)
            mcux = -(-width // (8 * hmax))
            mcuy = -(-height // (8 * vmax))
            for c in comps:
                c.coef = np.zeros((mcuy * c.v, mcux * c.h, 64), dtype=np.int64)
        elif 0xC2 <= marker <= 0xCF and marker not in (0xC4, 0xC8, 0xCC):
            raise UnsupportedFormat(f"SOF marker 0x{marker:02X} (non-baseline) is not supported")
        elif marker == 0xDD:
            if len(seg) < 2:
                raise CorruptStream("truncated DRI")
            (restart,) = struct.unpack(">H", seg[:2])
        elif marker == 0xDA:
            if not comps:
                raise CorruptStream("SOS before SOF")
            ns = seg[0]
            if len(seg) < 1 + 2 * ns + 3:
                raise CorruptStream("truncated SOS")
            scan = []
            for s in range(ns):
                cid, t = seg[1 + 2 * s], seg[2 + 2 * s]
                match = [c for c in comps if c.cid == cid]
                if not match:
                    raise CorruptStream(f"scan references unknown component {cid}")
                match[0].td, match[0].ta = t >> 4, t & 15
                scan.append(match[0])
            segments, i = _unstuff(data, i)
            _decode_scan(scan, comps, width, height, restart, segments, dc_tabs, ac_tabs)
        # APPn, COM and anything else carrying a length are skipped
    if not comps:
        raise CorruptStream("no frame header found")
    if not seen_eoi:
        raise CorruptStream("missing EOI marker")
    return _reconstruct(comps, width, height, qt)


def _decode_scan(scan, comps, width, height, restart, segments, dc_tabs, ac_tabs):
    for c in scan:
        if c.td not in dc_tabs or c.ta not in ac_tabs:
            raise CorruptStream("scan references undefined Huffman table")
        c.pred = 0
    hmax = max(c.h for c in comps)
    vmax = max(c.v for c in comps)
    if len(scan) == 1:
        c = scan[0]
        bw = -(-(-(-width * c.h // hmax)) // 8)
        bh = -(-(-(-height * c.v // vmax)) // 8)
        units = [[(c, y, x)] for y in range(bh) for x in range(bw)]
    else:
        mcux = -(-width // (8 * hmax))
        mcuy = -(-height // (8 * vmax))
        units = []
        for my in range(mcuy):
            for mx in range(mcux):
                unit = []
                for c in scan:
                    for by in range(c.v):
                        for bx in range(c.h):
                            unit.append((c, my * c.v + by, mx * c.h + bx))
                units.append(unit)

    per = restart if restart else len(units)
    seg_idx = 0
    reader = None
    for u, unit in enumerate(units):
        if u % per == 0:
            if seg_idx >= len(segments):
                raise CorruptStream("missing restart interval data")
            reader = _BitReader(segments[seg_idx])
            seg_idx += 1
            for c in scan:
                c.pred = 0
        for c, by, bx in unit:
            _decode_block(reader, c, c.coef[by, bx], dc_tabs[c.td], ac_tabs[c.ta])


def _decode_block(reader, comp, out, dc_tab, ac_tab):
    t = reader.decode(dc_tab)
    if t > 11:
        raise CorruptStream("DC magnitude category out of range")
    comp.pred += _extend(reader.bits(t), t)
    zz = [0] * 64
    zz[0] = comp.pred
    k = 1
    while k < 64:
        rs = reader.decode(ac_tab)
        r, s = rs >> 4, rs & 15
        if s == 0:
            if r == 15:
                k += 16
                continue
            break
        k += r
        if k > 63:
            raise CorruptStream("AC coefficient index out of range")
        zz[k] = _extend(reader.bits(s), s)
        k += 1
    out[ZIGZAG] = zz


def _reconstruct(comps, width, height, qt):
    hmax = max(c.h for c in comps)
    vmax = max(c.v for c in comps)
    planes = []
    for c in comps:
        if c.tq not in qt:
            raise CorruptStream(f"undefined quantisation table {c.tq}")
        rows, cols, _ = c.coef.shape
        blocks = c.coef.reshape(rows, cols, 8, 8) * qt[c.tq]
        spatial = _DCT.T @ blocks @ _DCT
        plane = spatial.transpose(0, 2, 1, 3).reshape(rows * 8, cols * 8) + 128.0
        plane = np.repeat(np.repeat(plane, vmax // c.v, axis=0), hmax // c.h, axis=1)
        planes.append(plane[:height, :width])
    img = np.stack(planes, axis=-1)
    if len(comps) == 3:
        img = _ycbcr_to_rgb(img)
    return Raster(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))
