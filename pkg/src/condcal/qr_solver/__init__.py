"""Pinball-loss quantile regression solvers."""

from .kernel import KernelQrFit, solve_kernel_qr
from .linear import PinballProblem, QrFit, eq_tolerance, pinball_loss, solve_linear_qr
from .lipschitz import LipschitzQrFit, solve_lipschitz_qr
from .simplex import RankDeficientError, SolverError

__all__ = [
    "KernelQrFit",
    "LipschitzQrFit",
    "PinballProblem",
    "QrFit",
    "RankDeficientError",
    "SolverError",
    "eq_tolerance",
    "pinball_loss",
    "solve_kernel_qr",
    "solve_linear_qr",
    "solve_lipschitz_qr",
]
