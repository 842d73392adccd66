"""Seedable counter-based random streams with named substreams.

Algorithm: each stream is a Philox-4x64-10 counter generator (numpy's
``np.random.Philox``) whose 128-bit key is the first 16 bytes of
``SHA-256(b"wavediff/" + name + b"/" + seed.to_bytes(8, "little"))``; the
counter starts at zero.  Normal variates come from numpy's
``Generator.standard_normal`` (ziggurat) over that bit stream, uniforms from
``Generator.random`` and integers from ``Generator.integers``.

Because each name hashes to an independent key, consumers that draw from
"data" never perturb the "noise", "latent" or "init" streams, whatever order
they run in.
"""

from __future__ import annotations

import hashlib

import numpy as np

STATE_FIELDS = ("counter", "key", "buffer", "misc")


def _key_for(seed: int, name: str) -> np.ndarray:
    digest = hashlib.sha256(b"wavediff/" + name.encode("utf-8") + b"/"
                            + int(seed % 2**64).to_bytes(8, "little")).digest()
    return np.frombuffer(digest[:16], dtype="<u8").astype(np.uint64)


class RngStream:
    """One named substream of a 64-bit seed.

    ``draws`` counts the variates handed out (not bit-generator words).
    """

    def __init__(self, seed: int, name: str = "default"):
        self.seed = int(seed)
        self.name = name
        self.draws = 0
        self._bitgen = np.random.Philox(key=_key_for(self.seed, name))
        self._gen = np.random.Generator(self._bitgen)

    def normal(self, shape) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.draws += out.size
        return out

    def uniform(self, shape=None) -> np.ndarray:
        out = self._gen.random(shape)
        self.draws += int(np.size(out))
        return out

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        """Integers in ``[low, high)``."""
        out = self._gen.integers(low, high, size=shape)
        self.draws += int(np.size(out))
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{name}")

    # -- serialisation --------------------------------------------------------
    def get_state(self) -> dict[str, np.ndarray]:
        st = self._bitgen.state
        inner = st["state"]
        misc = np.array([st["buffer_pos"], st["has_uint32"], st["uinteger"], self.draws, self.seed % 2**64],
                        dtype=np.uint64)
        return {
            "counter": np.asarray(inner["counter"], dtype=np.uint64),
            "key": np.asarray(inner["key"], dtype=np.uint64),
            "buffer": np.asarray(st["buffer"], dtype=np.uint64),
            "misc": misc,
        }

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        misc = np.asarray(state["misc"], dtype=np.uint64)
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.asarray(state["counter"], dtype=np.uint64),
                      "key": np.asarray(state["key"], dtype=np.uint64)},
            "buffer": np.asarray(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(misc[0]),
            "has_uint32": int(misc[1]),
            "uinteger": int(misc[2]),
        }
        self.draws = int(misc[3])


class RngStreams:
    """A family of named substreams sharing one seed."""

    NAMES = ("data", "noise", "latent", "init", "eval")

    def __init__(self, seed: int, names=NAMES):
        self.seed = int(seed)
        self.streams = {n: RngStream(seed, n) for n in names}

    def __getitem__(self, name: str) -> RngStream:
        if name not in self.streams:
            self.streams[name] = RngStream(self.seed, name)
        return self.streams[name]

    def get_state(self) -> dict[str, dict[str, np.ndarray]]:
        return {n: s.get_state() for n, s in self.streams.items()}

    def set_state(self, states: dict[str, dict[str, np.ndarray]]) -> None:
        for n, st in states.items():
            self[n].set_state(st)
