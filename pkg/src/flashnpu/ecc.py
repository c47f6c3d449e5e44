"""Outlier-protecting on-die ECC: bit-exact encode/decode plus analytics.

Protection structure for one weight page of signed 8-bit values:

* 9 copies of the outlier threshold (smallest protected magnitude), first.
* One record per protected value, in strictly increasing address order:
  a 14-bit address, 5 Hamming parity bits over the address, and two 8-bit
  copies of the value.  floor(1% of the page) values are protected, the
  ones with the largest absolute magnitude (ties go to the lower address).

Packed MSB-first into ceil((8*9 + 35*163)/8) = 723 bytes for a 16 KB page,
within the 1664-byte spare area.  The bit arithmetic does not divide by 8,
so the final byte carries zero padding.

Decode recovers the threshold by bitwise majority over its 9 copies,
corrects single-bit address errors (non-positional syndromes drop the
record: the value falls back to unprotected), restores each protected
value by bitwise majority over {copy 1, copy 2, page value}, and zeroes
any unprotected value whose magnitude exceeds the recovered threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class EccError(ValueError):
    pass


THRESHOLD_COPIES = 9
VALUE_COPIES = 2           # N: even, two stored copies vote with the page value
PROTECT_FRACTION = 0.01

# Hamming(19,14): data at the non-power-of-two positions of 1..19, parity at
# powers of two.  A syndrome above 19 matches no position: uncorrectable.
_CODE_LEN = 19
_PARITY_POS = (1, 2, 4, 8, 16)
_DATA_POS = tuple(p for p in range(1, _CODE_LEN + 1) if p not in _PARITY_POS)
ADDR_BITS = len(_DATA_POS)  # 14
PARITY_BITS = len(_PARITY_POS)  # 5


def hamming14_encode(addr: int) -> int:
    """Five parity bits protecting a 14-bit address."""
    if not 0 <= addr < (1 << ADDR_BITS):
        raise EccError(f"address {addr} does not fit {ADDR_BITS} bits")
    acc = 0
    for i, pos in enumerate(_DATA_POS):
        if (addr >> (ADDR_BITS - 1 - i)) & 1:
            acc ^= pos
    parity = 0
    for k, pos in enumerate(_PARITY_POS):
        if acc & pos:
            parity |= 1 << (PARITY_BITS - 1 - k)
    return parity


def hamming14_decode(addr: int, parity: int) -> tuple:
    """Correct a single flipped bit among the 19; returns (addr, status).

    status is 'clean', 'corrected', or 'uncorrectable'.  Some double flips
    alias to a valid position and miscorrect; the 5-bit budget has no
    spare bit for true double-error detection.
    """
    if not 0 <= addr < (1 << ADDR_BITS) or not 0 <= parity < (1 << PARITY_BITS):
        raise EccError("address or parity out of range")
    acc = 0
    for i, pos in enumerate(_DATA_POS):
        if (addr >> (ADDR_BITS - 1 - i)) & 1:
            acc ^= pos
    for k, pos in enumerate(_PARITY_POS):
        if (parity >> (PARITY_BITS - 1 - k)) & 1:
            acc ^= pos
    if acc == 0:
        return addr, "clean"
    if acc > _CODE_LEN:
        return addr, "uncorrectable"
    if acc in _PARITY_POS:
        return addr, "corrected"  # flipped parity bit; address intact
    i = _DATA_POS.index(acc)
    return addr ^ (1 << (ADDR_BITS - 1 - i)), "corrected"


@dataclass(frozen=True)
class EccBlock:
    threshold: int                  # magnitude, 0..128
    entries: tuple                  # ((addr, parity, copy1, copy2), ...) by addr
    n_elements: int

    @property
    def packed_size(self) -> int:
        return packed_size(self.n_elements)


def entry_count(n_elements: int) -> int:
    return math.floor(PROTECT_FRACTION * n_elements)


def packed_size(n_elements: int) -> int:
    bits = 8 * THRESHOLD_COPIES + (ADDR_BITS + PARITY_BITS + 8 * VALUE_COPIES) \
        * entry_count(n_elements)
    return (bits + 7) // 8


def encode_page(values: np.ndarray) -> EccBlock:
    """Select and record the top-1% magnitudes of a signed INT8 page."""
    vals = np.asarray(values, dtype=np.int8)
    n = vals.size
    count = entry_count(n)
    mags = np.abs(vals.astype(np.int16))
    order = np.argsort(-mags, kind="stable")  # stable: ties -> lower address
    chosen = np.sort(order[:count])
    threshold = int(mags[chosen].min()) if count else 0
    page_u8 = vals.view(np.uint8)
    entries = tuple(
        (int(a), hamming14_encode(int(a)), int(page_u8[a]), int(page_u8[a]))
        for a in chosen)
    return EccBlock(threshold=threshold, entries=entries, n_elements=n)


_ENTRY_BITS = ADDR_BITS + PARITY_BITS + 8 * VALUE_COPIES  # 35


def _field_bits(values: np.ndarray, width: int) -> np.ndarray:
    shifts = np.arange(width - 1, -1, -1)
    return ((values[:, None] >> shifts) & 1).astype(np.uint8)


def pack_block(block: EccBlock) -> bytes:
    """Serialize: threshold copies, then entries in address order, MSB-first."""
    nbits = packed_size(block.n_elements) * 8
    bits = np.zeros(nbits, dtype=np.uint8)
    thr = np.full(THRESHOLD_COPIES, block.threshold & 0xFF, dtype=np.uint16)
    bits[:8 * THRESHOLD_COPIES] = _field_bits(thr, 8).ravel()
    if block.entries:
        e = np.asarray(block.entries, dtype=np.uint16)
        entry_bits = np.hstack([
            _field_bits(e[:, 0], ADDR_BITS),
            _field_bits(e[:, 1], PARITY_BITS),
            _field_bits(e[:, 2], 8),
            _field_bits(e[:, 3], 8),
        ]).ravel()
        base = 8 * THRESHOLD_COPIES
        bits[base:base + entry_bits.size] = entry_bits
    return np.packbits(bits).tobytes()


def _bits_to_int(bits: np.ndarray) -> np.ndarray:
    width = bits.shape[1]
    weights = (1 << np.arange(width - 1, -1, -1)).astype(np.int64)
    return bits.astype(np.int64) @ weights


def unpack_block(raw: bytes, n_elements: int):
    """Deserialize into (threshold_copies, entry arrays) without any voting."""
    if len(raw) != packed_size(n_elements):
        raise EccError(f"expected {packed_size(n_elements)} bytes, got {len(raw)}")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
    thresholds = _bits_to_int(bits[:8 * THRESHOLD_COPIES].reshape(-1, 8))
    n = entry_count(n_elements)
    base = 8 * THRESHOLD_COPIES
    e = bits[base:base + n * _ENTRY_BITS].reshape(n, _ENTRY_BITS)
    addr = _bits_to_int(e[:, :ADDR_BITS])
    parity = _bits_to_int(e[:, ADDR_BITS:ADDR_BITS + PARITY_BITS])
    c1 = _bits_to_int(e[:, ADDR_BITS + PARITY_BITS:ADDR_BITS + PARITY_BITS + 8])
    c2 = _bits_to_int(e[:, ADDR_BITS + PARITY_BITS + 8:])
    return thresholds, (addr, parity, c1, c2)


@dataclass(frozen=True)
class ErrorModel:
    bit_error_rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.bit_error_rate <= 1.0:
            raise EccError("bit_error_rate must be in [0, 1]")


def inject_errors(page: bytes, ecc: bytes, model: ErrorModel) -> tuple:
    """Flip every bit of page and ECC independently with probability x."""
    rng = np.random.default_rng(model.seed)
    buf = np.frombuffer(bytes(page) + bytes(ecc), dtype=np.uint8).copy()
    total_bits = buf.size * 8
    count = int(rng.binomial(total_bits, model.bit_error_rate))
    if count:
        positions = rng.choice(total_bits, size=count, replace=False)
        np.bitwise_xor.at(buf, positions // 8,
                          (128 >> (positions % 8)).astype(np.uint8))
    return buf[:len(page)].tobytes(), buf[len(page):].tobytes()


# syndrome lookup tables for the vectorized page decoder; cross-checked
# against hamming14_decode in the tests
def _build_tables():
    acc_data = np.zeros(1 << ADDR_BITS, dtype=np.uint8)
    for i, pos in enumerate(_DATA_POS):
        hit = (np.arange(1 << ADDR_BITS) >> (ADDR_BITS - 1 - i)) & 1
        acc_data ^= (hit * pos).astype(np.uint8)
    acc_par = np.zeros(1 << PARITY_BITS, dtype=np.uint8)
    for k, pos in enumerate(_PARITY_POS):
        hit = (np.arange(1 << PARITY_BITS) >> (PARITY_BITS - 1 - k)) & 1
        acc_par ^= (hit * pos).astype(np.uint8)
    flip = np.zeros(32, dtype=np.int64)
    for i, pos in enumerate(_DATA_POS):
        flip[pos] = 1 << (ADDR_BITS - 1 - i)
    return acc_data, acc_par, flip


_ACC_DATA, _ACC_PAR, _FLIP = _build_tables()
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def _keep_increasing(addresses: np.ndarray, usable: np.ndarray) -> np.ndarray:
    """Mask of entries forming the longest strictly increasing address run.

    Stored addresses are strictly increasing, so an entry whose decoded
    address falls out of order was corrupted past what the Hamming code
    could see (a miscorrected double error); dropping the minimal set of
    offenders costs nothing on clean records.
    """
    import bisect
    idxs = np.flatnonzero(usable)
    seq = addresses[idxs]
    tails = []          # smallest tail address of each run length
    tail_pos = []       # position in seq achieving that tail
    prev = [-1] * len(seq)
    for i, v in enumerate(seq):
        j = bisect.bisect_left(tails, v)
        if j == len(tails):
            tails.append(v)
            tail_pos.append(i)
        else:
            tails[j] = v
            tail_pos[j] = i
        prev[i] = tail_pos[j - 1] if j else -1
    keep = np.zeros(addresses.size, dtype=bool)
    i = tail_pos[-1] if tail_pos else -1
    while i >= 0:
        keep[idxs[i]] = True
        i = prev[i]
    return keep


def decode_page(page: bytes, ecc: bytes, return_detail: bool = False):
    """Total decode: always returns a corrected page of signed INT8.

    With return_detail, also returns the mask of positions the decoder
    protected (records whose address survived Hamming decoding) and the
    recovered threshold.
    """
    vals = np.frombuffer(page, dtype=np.uint8).copy()
    thresholds, (addr, parity, c1, c2) = unpack_block(ecc, vals.size)
    tbits = np.unpackbits(thresholds.astype(np.uint8)[:, None], axis=1)
    threshold = int(_bits_to_int(
        (tbits.sum(axis=0) * 2 > THRESHOLD_COPIES).astype(np.uint8)[None, :])[0])

    syndrome = _ACC_DATA[addr] ^ _ACC_PAR[parity]
    usable = syndrome <= _CODE_LEN
    addr2 = addr ^ _FLIP[syndrome]
    usable &= addr2 < vals.size
    # a corrected address whose agreeing copies contradict the page byte in
    # 3+ bits is a miscorrected double error, not a protected value
    guard = (syndrome != 0) & usable & (c1 == c2)
    mismatch = _POPCOUNT[(vals[np.minimum(addr2, vals.size - 1)] ^ c1) & 0xFF]
    usable &= ~(guard & (mismatch >= 3))
    usable &= _keep_increasing(addr2, usable)
    a, v1, v2 = addr2[usable], c1[usable], c2[usable]
    page_vals = vals[a].astype(np.int64)
    voted = (v1 & v2) | (v1 & page_vals) | (v2 & page_vals)
    protected = np.zeros(vals.size, dtype=bool)
    vals[a] = voted.astype(np.uint8)  # duplicate addresses: later entry wins
    protected[a] = True

    mags = np.abs(vals.view(np.int8).astype(np.int16))
    fake = (~protected) & (mags > threshold)
    vals[fake] = 0
    out = vals.view(np.int8)
    if return_detail:
        return out, protected, threshold
    return out


def flip_rate_protected(n_copies: int, x: float, mode: str = "exact") -> float:
    """Per-bit flip probability after majority vote over N copies + original.

    The vote goes wrong only when more than half of the N+1 instances flip:
    sum over i in [N/2+1, N+1] of C(N+1, i) x^i (1-x)^(N+1-i); the approx
    mode keeps the leading term C(N+1, N/2+1) x^(N/2+1).
    """
    if n_copies < 2 or n_copies % 2:
        raise EccError("n_copies must be an even number >= 2")
    if not 0.0 <= x <= 1.0:
        raise EccError("x must be in [0, 1]")
    total = n_copies + 1
    k = n_copies // 2 + 1
    if mode == "approx":
        return math.comb(total, k) * x ** k
    if mode != "exact":
        raise EccError(f"unknown mode {mode!r}")
    return sum(math.comb(total, i) * x ** i * (1.0 - x) ** (total - i)
               for i in range(k, total + 1))


def protected_flip_rate_mc(n_copies: int, x: float, trials: int,
                           seed: int = 0) -> float:
    """Monte Carlo estimate of the per-bit post-vote flip rate."""
    if n_copies != 2:
        raise EccError("Monte Carlo path models the stored N=2 configuration")
    rng = np.random.default_rng(seed)
    wrong = 0
    chunk = 5_000_000
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        flips = rng.random((3, n)) < x
        voted = (flips[0] & flips[1]) | (flips[0] & flips[2]) | (flips[1] & flips[2])
        wrong += int(voted.sum())
        done += n
    return wrong / trials
