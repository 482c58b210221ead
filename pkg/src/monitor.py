"""Diagnostics collected while the Gibbs sampler runs.

The monitor receives one record per sweep (timing and train RMSE) plus events
raised inside a sweep: conjugate gradient solves and Cholesky jitter. It turns
them into the PosteriorSummary returned by the sampler and reported by the CLI.
"""

import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional

from .errors import NumericalError
from .logger import get_logger
from .numerics import CgResult

logger = get_logger(__name__)


@dataclass
class PosteriorSummary:
    """Run statistics of one chain.

    Attributes:
        rmse_trace: Train RMSE after each sweep (capped subsample).
        sweep_seconds: Wall time of each sweep.
        samples_collected: Post-burn-in states forwarded to the sink.
        cg_solves: Number of conjugate gradient solves.
        cg_iterations: Total CG iterations over all solves.
        cg_max_iterations: Largest iteration count of a single solve.
        cg_nonconverged: Solves that stopped at the iteration cap.
        jitter_events: Cholesky factorizations that needed diagonal jitter.
        max_jitter: Largest jitter applied.
    """

    rmse_trace: List[float] = field(default_factory=list)
    sweep_seconds: List[float] = field(default_factory=list)
    samples_collected: int = 0
    cg_solves: int = 0
    cg_iterations: int = 0
    cg_max_iterations: int = 0
    cg_nonconverged: int = 0
    jitter_events: int = 0
    max_jitter: float = 0.0

    @property
    def total_seconds(self) -> float:
        return float(sum(self.sweep_seconds))

    @property
    def mean_sweep_seconds(self) -> float:
        return self.total_seconds / len(self.sweep_seconds) if self.sweep_seconds else 0.0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["total_seconds"] = self.total_seconds
        data["mean_sweep_seconds"] = self.mean_sweep_seconds
        return data


class SamplerMonitor:
    """Collects per-sweep and per-solve diagnostics for one chain.

    CG and jitter events may arrive from worker threads, so updates to the
    counters are serialized by a lock.

    Attributes:
        _summary (PosteriorSummary): Statistics gathered so far.
        _lock (threading.Lock): Guards counter updates from worker threads.
        _log_every (int): Log progress every this many sweeps.
    """

    _summary: PosteriorSummary
    _lock: threading.Lock
    _log_every: int

    def __init__(self, log_every: int = 1) -> None:
        """Initialize an empty monitor.

        Args:
            log_every (int): Progress logging interval in sweeps. Defaults to 1.
        """
        self._summary = PosteriorSummary()
        self._lock = threading.Lock()
        self._log_every = max(1, log_every)

    def record_sweep(
        self, iteration: int, total: int, seconds: float, rmse: Optional[float]
    ) -> None:
        """Record one finished sweep and log progress.

        Raises:
            NumericalError: If the train RMSE is not finite, i.e. the chain diverged.
        """
        value = float("nan") if rmse is None else float(rmse)
        if rmse is not None and not math.isfinite(value):
            raise NumericalError(f"train RMSE became {value} at sweep {iteration}")
        self._summary.rmse_trace.append(value)
        self._summary.sweep_seconds.append(float(seconds))
        if iteration % self._log_every == 0 or iteration == total:
            logger.info(
                f"Sweep {iteration}/{total}: train RMSE {value:.5f} ({seconds:.3f}s)"
            )

    def record_sample(self) -> None:
        """Count one post-burn-in state forwarded to the sink."""
        self._summary.samples_collected += 1

    def record_cg(self, results: Iterable[CgResult], label: str = "") -> None:
        """Record conjugate gradient solves; non-convergence is logged, not raised."""
        results = list(results)
        with self._lock:
            for result in results:
                self._summary.cg_solves += 1
                self._summary.cg_iterations += result.iterations
                self._summary.cg_max_iterations = max(
                    self._summary.cg_max_iterations, result.iterations
                )
                if not result.converged:
                    self._summary.cg_nonconverged += 1
        stalled = [r for r in results if not r.converged]
        if stalled:
            worst = max(r.residual for r in stalled)
            logger.warning(
                f"CG did not converge for {len(stalled)} of {len(results)} "
                f"right-hand sides{' of ' + label if label else ''} "
                f"(worst residual {worst:.3e}); continuing with the last iterate"
            )

    def record_jitter(self, amount: float) -> None:
        with self._lock:
            self._summary.jitter_events += 1
            self._summary.max_jitter = max(self._summary.max_jitter, float(amount))

    def summary(self) -> PosteriorSummary:
        return self._summary
