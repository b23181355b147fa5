"""Masked secure summation across clients, simulated in-process.

The shape follows the pairwise-masking protocol with dropout recovery:

1. A trusted dealer stands in for key agreement. Every pair ``(i, j)`` gets a
   shared seed ``s_ij``; every client gets a private self-mask seed ``b_i``.
   Both ``b_i`` and client ``i``'s row of pairwise seeds are Shamir-shared
   t-of-n among all participants.
2. Client ``i`` uploads ``x_i + PRG(b_i) + sum_{j>i} PRG(s_ij) - sum_{j<i} PRG(s_ij)``
   in ``Z_{2^bits}``, where ``x_i`` is the fixed-point encoding of its vector.
3. The server names survivors and dropouts. Each responding client returns its
   shares of ``b_j`` for survivors and of the seed row for dropouts, never both
   for the same peer. With ``>= t`` responses the server strips all masks and
   decodes the survivors' sum.

Randomness is drawn from seeded generators so a run is reproducible; this is a
simulator, not a cryptographic implementation.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

PRIME = (1 << 127) - 1
SCALE_BITS = 15
DEFAULT_BITS = 64
DEALER = 0xFFFFFFFF
SERVER = 0xFFFFFFFE


class ProtocolError(RuntimeError):
    pass


class AbortError(ProtocolError):
    """Fewer than ``t`` participants are left to finish the round."""


class IntegrityError(ProtocolError):
    """Shares do not agree with each other or with the setup commitments."""


class Phase(IntEnum):
    KEY_SHARE = 0
    MASKED_INPUT = 1
    UNMASK_REQUEST = 2
    DONE = 3


class Kind(IntEnum):
    SHARES = 1
    MASKED = 2
    UNMASK_REQUEST = 3
    UNMASK_RESPONSE = 4
    PLAIN = 5  # unmasked float64 upload when secure aggregation is off


# -- Shamir over GF(PRIME) ---------------------------------------------------


def shamir_share(
    secret: int, n: int, t: int, rnd: random.Random, prime: int = PRIME
) -> list[tuple[int, int]]:
    """Split ``secret`` into ``n`` points of a random degree ``t-1`` polynomial."""
    if not 1 <= t <= n:
        raise ValueError(f"need 1 <= t <= n, got t={t}, n={n}")
    if not 0 <= secret < prime:
        raise ValueError("secret outside the field")
    coeffs = [secret] + [rnd.randrange(prime) for _ in range(t - 1)]
    shares = []
    for x in range(1, n + 1):
        y = 0
        for c in reversed(coeffs):
            y = (y * x + c) % prime
        shares.append((x, y))
    return shares


def lagrange_eval(points: list[tuple[int, int]], at: int, prime: int = PRIME) -> int:
    total = 0
    for i, (xi, yi) in enumerate(points):
        num, den = 1, 1
        for j, (xj, _) in enumerate(points):
            if i != j:
                num = num * (at - xj) % prime
                den = den * (xi - xj) % prime
        total = (total + yi * num * pow(den, -1, prime)) % prime
    return total


def shamir_reconstruct(shares: Iterable[tuple[int, int]], t: int, prime: int = PRIME) -> int:
    """Recover the secret from ``>= t`` shares; extra shares must agree."""
    shares = sorted(set(shares))
    if len({x for x, _ in shares}) != len(shares):
        raise IntegrityError("conflicting shares for the same evaluation point")
    if len(shares) < t:
        raise AbortError(f"{len(shares)} shares, threshold is {t}")
    base = shares[:t]
    for x, y in shares[t:]:
        if lagrange_eval(base, x, prime) != y:
            raise IntegrityError(f"share at x={x} is inconsistent with the others")
    return lagrange_eval(base, 0, prime)


# -- fixed point and PRG -----------------------------------------------------


def encode(v: np.ndarray, scale_bits: int = SCALE_BITS, bits: int = DEFAULT_BITS) -> np.ndarray:
    q = np.round(np.asarray(v, dtype=np.float64) * (1 << scale_bits)).astype(np.int64)
    out = q.astype(np.uint64)
    return out if bits == 64 else out & np.uint64((1 << bits) - 1)


def decode(x: np.ndarray, scale_bits: int = SCALE_BITS, bits: int = DEFAULT_BITS) -> np.ndarray:
    if bits == 64:
        signed = x.view(np.int64)
    else:
        signed = x.astype(np.int64)
        signed = np.where(signed >= (1 << (bits - 1)), signed - (1 << bits), signed)
    return signed.astype(np.float64) / (1 << scale_bits)


def prg(seed: int, dim: int, bits: int = DEFAULT_BITS) -> np.ndarray:
    raw = np.random.Generator(np.random.PCG64(seed)).bit_generator.random_raw(dim)
    return raw if bits == 64 else raw & np.uint64((1 << bits) - 1)


def _wrap(x: np.ndarray, bits: int) -> np.ndarray:
    return x if bits == 64 else x & np.uint64((1 << bits) - 1)


def _commit(value: int) -> bytes:
    return hashlib.sha256(value.to_bytes(16, "little")).digest()


# -- wire format -------------------------------------------------------------
#
# frame   := u32 payload_len | u32 sender | u32 receiver | u32 round | u8 kind | payload
# MASKED  := u32 dim | u8 bits | dim * u64
# SHARES / UNMASK_RESPONSE := u32 count | count * (u32 owner | u32 peer | u8 which | u32 x | 16-byte y)
#            which = 0 for a self-mask seed share (peer = owner), 1 for pairwise seed s_{owner,peer}
# UNMASK_REQUEST := u32 n_alive | u32 n_dropped | ids as u32
_HEADER = struct.Struct("<IIIIB")
_SHARE = struct.Struct("<IIBI16s")


@dataclass(frozen=True)
class Share:
    owner: int
    peer: int
    which: int  # 0 self seed, 1 pairwise seed
    x: int
    y: int


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    round: int
    kind: Kind
    payload: bytes

    def frame(self) -> bytes:
        return _HEADER.pack(len(self.payload), self.sender, self.receiver, self.round, self.kind) + self.payload


def encode_shares(shares: list[Share]) -> bytes:
    out = [struct.pack("<I", len(shares))]
    for s in shares:
        out.append(_SHARE.pack(s.owner, s.peer, s.which, s.x, s.y.to_bytes(16, "little")))
    return b"".join(out)


def decode_shares(buf: bytes) -> list[Share]:
    (count,) = struct.unpack_from("<I", buf, 0)
    if len(buf) != 4 + count * _SHARE.size:
        raise ProtocolError("share payload length mismatch")
    shares = []
    for k in range(count):
        owner, peer, which, x, y = _SHARE.unpack_from(buf, 4 + k * _SHARE.size)
        shares.append(Share(owner, peer, which, x, int.from_bytes(y, "little")))
    return shares


def encode_masked(vec: np.ndarray, bits: int) -> bytes:
    return struct.pack("<IB", vec.size, bits) + np.ascontiguousarray(vec, dtype="<u8").tobytes()


def decode_masked(buf: bytes) -> tuple[np.ndarray, int]:
    dim, bits = struct.unpack_from("<IB", buf, 0)
    if len(buf) != 5 + 8 * dim:
        raise ProtocolError("masked vector payload length mismatch")
    return np.frombuffer(buf, dtype="<u8", offset=5).astype(np.uint64), bits


def encode_request(alive: list[int], dropped: list[int]) -> bytes:
    return struct.pack(f"<II{len(alive)}I{len(dropped)}I", len(alive), len(dropped), *alive, *dropped)


def decode_request(buf: bytes) -> tuple[list[int], list[int]]:
    na, nd = struct.unpack_from("<II", buf, 0)
    ids = struct.unpack_from(f"<{na + nd}I", buf, 8)
    return list(ids[:na]), list(ids[na:])


def dump_transcript(messages: Iterable[Message]) -> bytes:
    return b"".join(m.frame() for m in messages)


def load_transcript(blob: bytes) -> list[Message]:
    out, pos = [], 0
    while pos < len(blob):
        if pos + _HEADER.size > len(blob):
            raise ProtocolError("truncated frame header")
        size, sender, receiver, rnd, kind = _HEADER.unpack_from(blob, pos)
        pos += _HEADER.size
        if pos + size > len(blob):
            raise ProtocolError("truncated frame payload")
        out.append(Message(sender, receiver, rnd, Kind(kind), blob[pos : pos + size]))
        pos += size
    return out


class SimBus:
    """In-process message queues with a drop schedule.

    ``drops`` maps a client id to the phase from which it goes silent: its
    messages in that phase and later are discarded, and nothing is delivered
    to it any more.
    """

    def __init__(self, drops: dict[int, Phase] | None = None, record: bool = True):
        self.drops = dict(drops or {})
        self.record = record
        self._queues: dict[int, list[Message]] = {}
        self.transcript: list[Message] = []
        self.sent_kinds: list[tuple[int, Kind, str]] = []

    def silent(self, client: int, phase: Phase) -> bool:
        at = self.drops.get(client)
        return at is not None and phase >= at

    def send(self, msg: Message, phase: Phase, tag: str = "") -> bool:
        if msg.sender not in (DEALER, SERVER) and self.silent(msg.sender, phase):
            return False
        if msg.receiver not in (DEALER, SERVER) and self.silent(msg.receiver, phase):
            return False
        self._queues.setdefault(msg.receiver, []).append(msg)
        self.sent_kinds.append((msg.sender, msg.kind, tag))
        if self.record:
            self.transcript.append(msg)
        return True

    def deliver(self, receiver: int) -> list[Message]:
        return self._queues.pop(receiver, [])


# -- participants ------------------------------------------------------------


@dataclass
class Participant:
    id: int
    peers: list[int]
    dim: int
    scale_bits: int = SCALE_BITS
    bits: int = DEFAULT_BITS
    phase: Phase = Phase.KEY_SHARE
    _self_seed: int = 0
    _pair_seeds: dict[int, int] = field(default_factory=dict)
    _held: dict[tuple[int, int, int], Share] = field(default_factory=dict)

    def receive_shares(self, shares: list[Share]) -> None:
        if self.phase is not Phase.KEY_SHARE:
            raise ProtocolError(f"client {self.id}: shares arrived in phase {self.phase.name}")
        for s in shares:
            self._held[(s.owner, s.which, s.peer)] = s

    def mask(self, v: np.ndarray) -> np.ndarray:
        if self.phase is not Phase.KEY_SHARE:
            raise ProtocolError(f"client {self.id}: mask called in phase {self.phase.name}")
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != self.dim:
            raise ValueError(f"client {self.id}: vector has {v.size} entries, session dim is {self.dim}")
        y = encode(v, self.scale_bits, self.bits)
        y = y + prg(self._self_seed, self.dim, self.bits)
        for j in self.peers:
            if j == self.id:
                continue
            stream = prg(self._pair_seeds[j], self.dim, self.bits)
            y = y + stream if j > self.id else y - stream
        self.phase = Phase.MASKED_INPUT
        return _wrap(y, self.bits)

    def respond_unmask(self, alive: list[int], dropped: list[int]) -> list[Share]:
        if self.phase is not Phase.MASKED_INPUT:
            raise ProtocolError(f"client {self.id}: unmask request in phase {self.phase.name}")
        if set(alive) & set(dropped):
            raise ProtocolError("a peer cannot be both alive and dropped")
        out = []
        for j in sorted(alive):
            out.append(self._held[(j, 0, j)])
        for j in sorted(dropped):
            out.extend(
                s for (owner, which, _), s in sorted(self._held.items()) if owner == j and which == 1
            )
        self.phase = Phase.DONE
        return out


@dataclass
class SessionInfo:
    """What the server knows after setup."""

    ids: list[int]
    threshold: int
    dim: int
    scale_bits: int
    bits: int
    commitments: dict[tuple[int, int, int], bytes]  # (owner, which, peer) -> sha256


def default_threshold(n: int) -> int:
    return max(2, math.ceil(2 * n / 3))


def setup(
    ids: list[int] | int,
    threshold: int | None = None,
    seed: int = 0,
    dim: int = 1,
    scale_bits: int = SCALE_BITS,
    bits: int = DEFAULT_BITS,
    bus: SimBus | None = None,
    round_no: int = 0,
) -> tuple[dict[int, Participant], SessionInfo]:
    """Dealer setup: pairwise seeds, self seeds, and t-of-n shares of both."""
    if isinstance(ids, int):
        ids = list(range(ids))
    ids = sorted(ids)
    n = len(ids)
    t = default_threshold(n) if threshold is None else threshold
    if not 2 <= t <= n:
        raise ValueError(f"threshold must satisfy 2 <= t <= n, got t={t}, n={n}")
    if bits not in (32, 64):
        raise ValueError("field modulus must be 2^32 or 2^64")
    rnd = random.Random(seed)
    x_of = {cid: k + 1 for k, cid in enumerate(ids)}

    parts = {cid: Participant(cid, ids, dim, scale_bits, bits) for cid in ids}
    for cid in ids:
        parts[cid]._self_seed = rnd.getrandbits(64)
    for a_idx, a in enumerate(ids):
        for b in ids[a_idx + 1 :]:
            s = rnd.getrandbits(64)
            parts[a]._pair_seeds[b] = s
            parts[b]._pair_seeds[a] = s

    commitments: dict[tuple[int, int, int], bytes] = {}
    outbox: dict[int, list[Share]] = {cid: [] for cid in ids}
    for owner in ids:
        secrets_ = [(0, owner, parts[owner]._self_seed)]
        secrets_ += [(1, peer, s) for peer, s in sorted(parts[owner]._pair_seeds.items())]
        for which, peer, value in secrets_:
            commitments[(owner, which, peer)] = _commit(value)
            for holder, (x, y) in zip(ids, shamir_share(value, n, t, rnd)):
                assert x == x_of[holder]
                outbox[holder].append(Share(owner, peer, which, x, y))

    for holder in ids:
        if bus is None:
            parts[holder].receive_shares(outbox[holder])
            continue
        msg = Message(DEALER, holder, round_no, Kind.SHARES, encode_shares(outbox[holder]))
        if bus.send(msg, Phase.KEY_SHARE, "setup"):
            for m in bus.deliver(holder):
                parts[holder].receive_shares(decode_shares(m.payload))
    return parts, SessionInfo(ids, t, dim, scale_bits, bits, commitments)


def unmask_and_sum(
    info: SessionInfo,
    masked: dict[int, np.ndarray],
    responses: dict[int, list[Share]],
) -> np.ndarray:
    """Strip masks from the survivors' uploads and decode their sum."""
    survivors = sorted(masked)
    dropped = [c for c in info.ids if c not in masked]
    t = info.threshold
    if len(survivors) < t:
        raise AbortError(f"{len(survivors)} survivors, threshold is {t}")
    if len(responses) < t:
        raise AbortError(f"{len(responses)} unmask responses, threshold is {t}")

    pooled: dict[tuple[int, int, int], list[tuple[int, int]]] = {}
    for sender, shares in responses.items():
        for s in shares:
            key = (s.owner, s.which, s.peer)
            if s.which == 0 and s.owner not in survivors:
                raise ProtocolError("self-seed share of a dropped client")
            if s.which == 1 and s.owner not in dropped:
                raise ProtocolError("pairwise seed share of a live client")
            pooled.setdefault(key, []).append((s.x, s.y))

    def recover(key: tuple[int, int, int]) -> int:
        value = shamir_reconstruct(pooled.get(key, []), t)
        if _commit(value) != info.commitments[key]:
            raise IntegrityError(f"reconstructed secret {key} does not match its commitment")
        return value

    total = np.zeros(info.dim, dtype=np.uint64)
    for cid in survivors:
        if masked[cid].size != info.dim:
            raise ProtocolError(f"client {cid} uploaded {masked[cid].size} entries, expected {info.dim}")
        total = total + masked[cid]
        total = total - prg(recover((cid, 0, cid)), info.dim, info.bits)
    for d in dropped:
        for cid in survivors:
            stream = prg(recover((d, 1, cid)), info.dim, info.bits)
            # survivor cid added +stream if d > cid, else subtracted it
            total = total - stream if d > cid else total + stream
    return decode(_wrap(total, info.bits), info.scale_bits, info.bits)


def secure_sum(
    vectors: dict[int, np.ndarray],
    threshold: int | None = None,
    seed: int = 0,
    bus: SimBus | None = None,
    round_no: int = 0,
    scale_bits: int = SCALE_BITS,
    bits: int = DEFAULT_BITS,
    tag: str = "",
) -> tuple[np.ndarray, list[int]]:
    """Run one full session over ``bus``; returns the decoded sum and the survivor ids."""
    bus = bus or SimBus()
    ids = sorted(vectors)
    dim = int(np.asarray(vectors[ids[0]]).size)
    parts, info = setup(ids, threshold, seed, dim, scale_bits, bits, bus, round_no)

    masked: dict[int, np.ndarray] = {}
    for cid in ids:
        if bus.silent(cid, Phase.KEY_SHARE):
            continue
        y = parts[cid].mask(vectors[cid])
        bus.send(Message(cid, SERVER, round_no, Kind.MASKED, encode_masked(y, bits)), Phase.MASKED_INPUT, tag)
    for m in bus.deliver(SERVER):
        masked[m.sender], _ = decode_masked(m.payload)

    survivors = sorted(masked)
    dropped = [c for c in ids if c not in masked]
    if len(survivors) < info.threshold:
        raise AbortError(f"{len(survivors)} survivors, threshold is {info.threshold}")
    request = encode_request(survivors, dropped)
    for cid in survivors:
        bus.send(Message(SERVER, cid, round_no, Kind.UNMASK_REQUEST, request), Phase.UNMASK_REQUEST, tag)
    for cid in survivors:
        for m in bus.deliver(cid):
            alive, gone = decode_request(m.payload)
            resp = parts[cid].respond_unmask(alive, gone)
            bus.send(
                Message(cid, SERVER, round_no, Kind.UNMASK_RESPONSE, encode_shares(resp)),
                Phase.UNMASK_REQUEST,
                tag,
            )
    responses = {m.sender: decode_shares(m.payload) for m in bus.deliver(SERVER)}
    total = unmask_and_sum(info, masked, responses)
    logger.debug("secure sum over %d/%d clients", len(survivors), len(ids))
    return total, survivors


def replay(info: SessionInfo, transcript: bytes) -> np.ndarray:
    """Recompute the server's result from a dumped transcript."""
    masked: dict[int, np.ndarray] = {}
    responses: dict[int, list[Share]] = {}
    for m in load_transcript(transcript):
        if m.receiver != SERVER:
            continue
        if m.kind is Kind.MASKED:
            masked[m.sender], _ = decode_masked(m.payload)
        elif m.kind is Kind.UNMASK_RESPONSE:
            responses[m.sender] = decode_shares(m.payload)
    return unmask_and_sum(info, masked, responses)
