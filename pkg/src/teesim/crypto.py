"""Functional models of the memory-protection primitives.

Counter-mode encryption (pad = keyed mix of address binding + version number,
ciphertext = plaintext XOR pad), a 56-bit keyed MAC over (ciphertext, binding,
VN), XOR aggregation of per-line MACs into a tensor-wide tag, and an 8-ary
hash tree over the version-number lines with the root held on-chip.

Everything here is a toy keyed mixer, not real cryptography: the simulator
tests protocol and architecture logic and must run fast inside property
tests. Determinism and avalanche behavior are what matter.

Cachelines are 64 bytes and are handled internally as 512-bit ints so that
XOR en/decryption is a single big-int op.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional, Sequence

LINE_BYTES = 64
LINE_BITS = LINE_BYTES * 8
MASK56 = (1 << 56) - 1
MASK64 = (1 << 64) - 1
TREE_ARITY = 8

_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


class BindingMode(IntEnum):
    PHYSICAL_ADDR = 0
    TENSOR_LOGICAL = 1


class IntegrityFault(Exception):
    """Raised when a MAC or tree check fails. `kind` is one of
    'mac_mismatch', 'replay_or_tamper', 'tensor_mac', 'channel_tamper',
    'code_tamper', 'staging_tamper'."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind}: {detail}" if detail else kind)


def mix64(x: int) -> int:
    """splitmix64 finalizer: cheap keyed avalanche over 64 bits."""
    x = (x + _GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * _M1) & MASK64
    x = ((x ^ (x >> 27)) * _M2) & MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class CounterBinding:
    """Address half of the encryption counter.

    PHYSICAL_ADDR binds ciphertext to a physical cacheline address.
    TENSOR_LOGICAL binds to (tensor id, byte offset inside the tensor) so the
    same ciphertext decrypts after a device-to-device move. Offsets are
    64-byte aligned.
    """

    mode: BindingMode
    pa_or_tensor_id: int
    offset_bytes: int = 0

    def __post_init__(self):
        if self.mode == BindingMode.TENSOR_LOGICAL and self.offset_bytes % LINE_BYTES:
            raise ValueError("tensor-logical offset must be 64-byte aligned")

    def code(self) -> int:
        # injective 64-bit encoding used by keystream/mac folding
        return mix64((self.pa_or_tensor_id ^ mix64(self.offset_bytes)) ^ (int(self.mode) << 62))


@dataclass(frozen=True)
class KeyMaterial:
    """Session/enclave keys. 128-bit values kept as ints; `seed` ties a key
    set to a reproducible run."""

    enc_key: int
    mac_key: int
    seed: int

    @classmethod
    def from_seed(cls, seed: int) -> "KeyMaterial":
        s = seed & MASK64
        e0 = mix64(s ^ 0x656E63)       # distinct derivation lanes
        e1 = mix64(e0 ^ s)
        m0 = mix64(s ^ 0x6D6163)
        m1 = mix64(m0 ^ s)
        return cls(enc_key=(e0 << 64) | e1, mac_key=(m0 << 64) | m1, seed=s)


@dataclass
class CipherBlock:
    """One encrypted 64-byte line plus the counter it was sealed under."""

    data: int  # 512-bit ciphertext
    binding: CounterBinding
    vn: int

    def to_bytes(self) -> bytes:
        return self.data.to_bytes(LINE_BYTES, "little")


def keystream(key: KeyMaterial, binding: CounterBinding, vn: int) -> int:
    """64-byte pad as a 512-bit int, a pure function of (key, binding, vn)."""
    k0 = key.enc_key >> 64
    k1 = key.enc_key & MASK64
    base = mix64(k0 ^ binding.code())
    base = mix64(base ^ (vn & MASK56))
    base = mix64(base ^ k1)
    pad = 0
    for i in range(8):
        pad |= mix64(base ^ (i * _GOLDEN & MASK64)) << (64 * i)
    return pad


def encrypt_block(plain: bytes | int, binding: CounterBinding, vn: int,
                  key: KeyMaterial) -> CipherBlock:
    p = int.from_bytes(plain, "little") if isinstance(plain, bytes) else plain
    return CipherBlock(data=p ^ keystream(key, binding, vn), binding=binding, vn=vn)


def decrypt_block(block: CipherBlock, key: KeyMaterial,
                  vn: Optional[int] = None) -> bytes:
    """XOR involution. Decrypting under the wrong vn/binding yields garbage;
    integrity is the MAC's job, so no error here."""
    use_vn = block.vn if vn is None else vn
    p = block.data ^ keystream(key, block.binding, use_vn)
    return p.to_bytes(LINE_BYTES, "little")


def mac_block(block: CipherBlock, key: KeyMaterial) -> int:
    """56-bit tag over (ciphertext, binding, vn)."""
    k0 = key.mac_key >> 64
    k1 = key.mac_key & MASK64
    acc = mix64(k0 ^ block.binding.code())
    c = block.data
    for _ in range(8):
        acc = mix64(acc ^ (c & MASK64))
        c >>= 64
    acc = mix64(acc ^ (block.vn & MASK56))
    acc = mix64(acc ^ k1)
    return acc & MASK56


def mac_xor_aggregate(tags: Iterable[int]) -> int:
    """Order-independent XOR fold of per-line tags into one tensor tag."""
    acc = None
    for t in tags:
        acc = t if acc is None else acc ^ t
    if acc is None:
        raise ValueError("empty tensor")
    return acc


def _leaf_hash(key: KeyMaterial, index: int, vns: Sequence[int]) -> int:
    acc = mix64((key.mac_key & MASK64) ^ 0x6C656166 ^ index)
    for v in vns:
        acc = mix64(acc ^ (v & MASK56))
    return acc


def _node_hash(key: KeyMaterial, level: int, index: int, children: Sequence[int]) -> int:
    acc = mix64((key.mac_key >> 64) ^ (level << 32) ^ index)
    for h in children:
        acc = mix64(acc ^ h)
    return acc


class VnTree:
    """8-ary hash tree protecting version-number lines.

    Leaf i is one 64 B VN-line holding 8 packed VNs. Stored hash levels live
    off-chip in `levels` (an adversary may mutate them); only `root` is
    on-chip. A verification walk fetches one 64 B node-line (8 sibling
    hashes) per stored level, or stops early at a node-line the caller has
    already verified and cached.
    """

    def __init__(self, n_leaves: int, key: KeyMaterial):
        if n_leaves < 1:
            raise ValueError("tree needs at least one leaf")
        self.key = key
        depth = 1
        while TREE_ARITY ** depth < n_leaves:
            depth += 1
        self.depth = depth
        self.n_leaves = TREE_ARITY ** depth
        self.levels: list[list[int]] = []
        self.root: int = 0

    def build(self, leaf_lines: Sequence[Sequence[int]]) -> int:
        """Hash every level from the given VN-lines; returns (and stores) the
        on-chip root. Missing leaves hash as all-zero lines."""
        hashes = []
        for i in range(self.n_leaves):
            vns = leaf_lines[i] if i < len(leaf_lines) else (0,) * TREE_ARITY
            hashes.append(_leaf_hash(self.key, i, vns))
        self.levels = [hashes]
        level = 0
        while len(hashes) > TREE_ARITY:
            level += 1
            parents = []
            for j in range(0, len(hashes), TREE_ARITY):
                parents.append(_node_hash(self.key, level, j // TREE_ARITY,
                                          hashes[j:j + TREE_ARITY]))
            self.levels.append(parents)
            hashes = parents
        self.root = _node_hash(self.key, self.depth, 0, hashes)
        return self.root

    def node_line(self, level: int, line_idx: int) -> tuple[int, ...]:
        lo = line_idx * TREE_ARITY
        return tuple(self.levels[level][lo:lo + TREE_ARITY])

    def verify_path(self, leaf_index: int, leaf_vns: Sequence[int],
                    cache_lookup=None) -> list[tuple[int, int]]:
        """Walk leaf->root, comparing against the on-chip root or the first
        cached verified node-line. Returns the (level, line) node-lines that
        had to be fetched from off-chip storage; raises IntegrityFault on any
        mismatch (replayed or tampered VN state)."""
        h = _leaf_hash(self.key, leaf_index, leaf_vns)
        idx = leaf_index
        fetched: list[tuple[int, int]] = []
        for level in range(self.depth):
            j, slot = divmod(idx, TREE_ARITY)
            cached = cache_lookup(level, j) if cache_lookup is not None else None
            if cached is not None:
                if cached[slot] != h:
                    raise IntegrityFault("replay_or_tamper",
                                         f"leaf {leaf_index} vs cached node L{level}/{j}")
                return fetched
            fetched.append((level, j))
            stored = list(self.node_line(level, j))
            stored[slot] = h
            h = _node_hash(self.key, level + 1, j, stored)
            idx = j
        if h != self.root:
            raise IntegrityFault("replay_or_tamper", f"leaf {leaf_index} vs root")
        return fetched

    def update_path(self, leaf_index: int, leaf_vns: Sequence[int]
                    ) -> dict[tuple[int, int], tuple[int, ...]]:
        """Recompute the path after a VN-line change; rewrites `depth`
        node-lines plus the on-chip root. Returns the new node-line contents
        so callers can refresh verified cached copies."""
        h = _leaf_hash(self.key, leaf_index, leaf_vns)
        idx = leaf_index
        written: dict[tuple[int, int], tuple[int, ...]] = {}
        for level in range(self.depth):
            j, slot = divmod(idx, TREE_ARITY)
            self.levels[level][idx] = h
            line = self.node_line(level, j)
            written[(level, j)] = line
            h = _node_hash(self.key, level + 1, j, line)
            idx = j
        self.root = h
        return written
