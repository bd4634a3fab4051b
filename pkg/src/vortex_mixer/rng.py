"""Counter-based per-trajectory random streams.

Every trajectory owns a Philox stream keyed by (root_seed, trajectory_index)
packed into the 128-bit key, so the draws for trajectory i never depend on
batch size, chunking, or scheduling order.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for one trajectory of one experiment."""
    key = ((int(seed) & _MASK64) << 64) | (int(index) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def batch_rngs(seed: int, n_traj: int, offset: int = 0) -> list[np.random.Generator]:
    return [trajectory_rng(seed, offset + i) for i in range(n_traj)]


class NoiseStream:
    """Blockwise standard-normal increments for a batch of trajectories.

    Draws are grouped into blocks of steps to bound memory while preserving
    the per-trajectory stream contract: trajectory i consumes exactly the
    sequence its own generator produces, in step order.
    """

    def __init__(
        self,
        seed: int,
        n_traj: int,
        n_dirs: int,
        block_steps: int = 128,
        offset: int = 0,
    ):
        self._gens = batch_rngs(seed, n_traj, offset)
        self.n_traj = n_traj
        self.n_dirs = n_dirs
        self.block_steps = block_steps
        self._block: np.ndarray | None = None
        self._pos = 0

    def _refill(self) -> None:
        block = np.empty((self.block_steps, self.n_traj, self.n_dirs))
        for i, g in enumerate(self._gens):
            block[:, i, :] = g.standard_normal((self.block_steps, self.n_dirs))
        self._block = block
        self._pos = 0

    def next_step(self) -> np.ndarray:
        """Standard-normal draws (n_traj, n_dirs) for the next time step."""
        if self._block is None or self._pos >= self.block_steps:
            self._refill()
        out = self._block[self._pos]
        self._pos += 1
        return out


def initial_fields(
    seed: int,
    n_traj: int,
    n_modes: int,
    scale: float = 1.0,
    purpose: int = 0x5EED,
) -> np.ndarray:
    """Deterministic Gaussian initial coefficients, one row per trajectory.

    Drawn from streams keyed off (seed, purpose-offset + index) so they never
    collide with the trajectories' own noise streams.
    """
    out = np.empty((n_traj, n_modes))
    for i in range(n_traj):
        g = trajectory_rng(seed, (purpose << 32) + i)
        out[i] = scale * g.standard_normal(n_modes)
    return out
