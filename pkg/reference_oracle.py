"""精确稳态参考模块 - 截断光子数基底下的主方程稳态

在 原子⊗Fock 基底中构造稠密 Liouvillian，以迹约束替换一行后直接求解零空间，
作为弱驱动解析模型的验证基准。维数很小（n_max ≤ 4 时不超过 100×100），不使用稀疏矩阵。
"""
# pyright: reportAny=false

import csv
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from constants import AppConstants
from physics_core import ModelValidityError, PhysicalParams, weak_drive_steady_state
from utils import angular_to_mhz, relative_error

logger = logging.getLogger(__name__)


class SingularSystemError(Exception):
    """Liouvillian 零空间不是一维"""


@dataclass(frozen=True)
class OracleConfig:
    """单个稳态求解的参数（角频率，rad/s）"""
    n_max: int
    g: float
    delta_c: float
    delta_a_eff: float
    eta: float
    gamma: float
    kappa: float

    def __post_init__(self) -> None:
        if self.n_max < 1:
            raise ValueError(f"光子数截断必须 ≥ 1: {self.n_max}")
        if self.eta < 0 or self.g < 0:
            raise ValueError("g 与 eta 必须非负")
        if self.gamma <= 0 or self.kappa <= 0:
            raise ValueError("衰减率必须为正")

    @classmethod
    def from_params(cls, params: PhysicalParams, g: float, delta_c: float, delta_a_eff: float,
                    eta: float, n_max: int = 3) -> 'OracleConfig':
        return cls(n_max=n_max, g=g, delta_c=delta_c, delta_a_eff=delta_a_eff, eta=eta,
                   gamma=params.gamma, kappa=params.kappa)


@dataclass(frozen=True)
class SteadyDensityMatrix:
    """稳态密度矩阵，基底顺序为 原子(g, e) ⊗ Fock(0..n_max)"""
    matrix: np.ndarray
    n_max: int

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def hermiticity_error(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T)))

    def trace_error(self) -> float:
        return float(abs(np.trace(self.matrix) - 1.0))

    def min_eigenvalue(self) -> float:
        hermitian = 0.5 * (self.matrix + self.matrix.conj().T)
        return float(np.linalg.eigvalsh(hermitian)[0])

    def is_physical(self) -> bool:
        tol = AppConstants.TOLERANCES
        return (self.hermiticity_error() <= tol['hermiticity']
                and self.trace_error() <= tol['trace']
                and self.min_eigenvalue() >= -tol['positivity'])


class OracleObservables(NamedTuple):
    """期望值：⟨a⟩、⟨σ⟩、⟨a†a⟩、⟨σ†σ⟩、Re⟨a†σ⟩"""
    mean_a: complex
    mean_sigma: complex
    photon_number: float
    excitation: float
    interaction_real: float


def _operators(n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """构造 a 与 σ（原子⊗Fock 基底）"""
    n_fock = n_max + 1
    a_fock = np.diag(np.sqrt(np.arange(1, n_fock, dtype=float)), k=1).astype(complex)
    lowering = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
    a = np.kron(np.eye(2), a_fock)
    sigma = np.kron(lowering, np.eye(n_fock))
    return a, sigma


def _dissipator(jump: np.ndarray, identity: np.ndarray) -> np.ndarray:
    """行优先向量化的 Lindblad 耗散超算符 D[C]"""
    number = jump.conj().T @ jump
    return (np.kron(jump, jump.conj())
            - 0.5 * np.kron(number, identity)
            - 0.5 * np.kron(identity, number.T))


def build_liouvillian(config: OracleConfig) -> np.ndarray:
    """构造 Liouvillian（ħ=1，旋转坐标系）

    H = -Δc a†a - Δa σ†σ + g(a†σ + σ†a) + iη(a† - a)，
    跃迁算符 √(2κ)a 与 √(2γ)σ（振幅衰减率约定）。
    驱动项取 iη(a† - a)，使 ⟨a⟩ 与半经典振幅的相位约定一致，规范不变量不受影响。
    所有速率按最大速率缩放，稳态不变。
    """
    a, sigma = _operators(config.n_max)
    dim = a.shape[0]
    identity = np.eye(dim, dtype=complex)
    scale = max(config.g, config.kappa, config.gamma, abs(config.delta_c),
                abs(config.delta_a_eff), config.eta)

    ad = a.conj().T
    sd = sigma.conj().T
    hamiltonian = (-config.delta_c * ad @ a
                   - config.delta_a_eff * sd @ sigma
                   + config.g * (ad @ sigma + sd @ a)
                   + 1j * config.eta * (ad - a)) / scale

    liouvillian = -1j * (np.kron(hamiltonian, identity) - np.kron(identity, hamiltonian.T))
    liouvillian += (2.0 * config.kappa / scale) * _dissipator(a, identity)
    liouvillian += (2.0 * config.gamma / scale) * _dissipator(sigma, identity)
    return liouvillian


def steady_state(config: OracleConfig) -> SteadyDensityMatrix:
    """求解 L(ρ)=0 的唯一迹为 1 的稳态

    Args:
        config: 求解参数

    Returns:
        SteadyDensityMatrix: 稳态密度矩阵

    Raises:
        SingularSystemError: 零空间不是一维
    """
    liouvillian = build_liouvillian(config)
    dim = 2 * (config.n_max + 1)

    singular_values = np.linalg.svd(liouvillian, compute_uv=False)
    if singular_values[-2] <= AppConstants.TOLERANCES['null_space_ratio'] * singular_values[0]:
        raise SingularSystemError(
            f"Liouvillian 零空间维数大于 1（第二小奇异值 {singular_values[-2]:.3g}）")

    system = liouvillian.copy()
    system[0, :] = 0.0
    system[0, np.arange(dim) * (dim + 1)] = 1.0
    rhs = np.zeros(dim * dim, dtype=complex)
    rhs[0] = 1.0
    try:
        vec = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"稳态线性方程求解失败: {str(e)}") from e
    return SteadyDensityMatrix(matrix=vec.reshape(dim, dim), n_max=config.n_max)


def observables(rho: SteadyDensityMatrix) -> OracleObservables:
    """由密度矩阵计算期望值"""
    a, sigma = _operators(rho.n_max)
    matrix = rho.matrix
    mean_a = complex(np.trace(matrix @ a))
    mean_sigma = complex(np.trace(matrix @ sigma))
    photon_number = float(np.trace(matrix @ a.conj().T @ a).real)
    excitation = float(np.trace(matrix @ sigma.conj().T @ sigma).real)
    interaction = complex(np.trace(matrix @ a.conj().T @ sigma))
    return OracleObservables(mean_a, mean_sigma, photon_number, excitation, interaction.real)


@dataclass(frozen=True)
class OracleComparison:
    """弱驱动解析模型与精确稳态在单个网格点上的比较"""
    g: float
    delta_c: float
    delta_a_eff: float
    n_empty: float
    analytic_photon_number: float
    oracle_photon_number: float
    analytic_excitation: float
    oracle_excitation: float
    err_mean_a: float
    err_mean_sigma: float
    err_photon_number: float
    err_excitation: float
    err_interaction: float

    @property
    def max_error(self) -> float:
        return max(self.err_mean_a, self.err_mean_sigma, self.err_photon_number,
                   self.err_excitation, self.err_interaction)


def compare_point(params: PhysicalParams, g: float, delta_c: float, delta_a_eff: float,
                  eta: float, n_max: int = 3) -> OracleComparison:
    """在一个 (g, Δc, Δa_eff) 点上比较解析模型与精确稳态

    相互作用项按复数 ⟨a†σ⟩ 与 a*σ 的相对误差比较，其实部误差不超过该值。
    解析模型失效时所有误差记为无穷大。
    """
    floor = AppConstants.TOLERANCES['absolute_floor']
    rho = steady_state(OracleConfig.from_params(params, g, delta_c, delta_a_eff, eta, n_max))
    exact = observables(rho)
    n_empty = (eta / params.kappa) ** 2
    try:
        response = weak_drive_steady_state(g, delta_c, delta_a_eff, eta, params)
    except ModelValidityError:
        inf = float('inf')
        return OracleComparison(g, delta_c, delta_a_eff, n_empty, float('nan'), exact.photon_number,
                                float('nan'), exact.excitation, inf, inf, inf, inf, inf)

    field = response.field
    a_matrix, sigma_matrix = _operators(n_max)
    exact_interaction = complex(np.trace(rho.matrix @ a_matrix.conj().T @ sigma_matrix))
    analytic_interaction = field.a.conjugate() * field.sigma
    return OracleComparison(
        g=g, delta_c=delta_c, delta_a_eff=delta_a_eff, n_empty=n_empty,
        analytic_photon_number=response.photon_number,
        oracle_photon_number=exact.photon_number,
        analytic_excitation=response.excitation,
        oracle_excitation=exact.excitation,
        err_mean_a=relative_error(exact.mean_a, field.a, floor),
        err_mean_sigma=relative_error(exact.mean_sigma, field.sigma, floor),
        err_photon_number=relative_error(exact.photon_number, response.photon_number, floor),
        err_excitation=relative_error(exact.excitation, response.excitation, floor),
        err_interaction=relative_error(exact_interaction, analytic_interaction, floor),
    )


def comparison_grid(params: PhysicalParams, eta: float, couplings: list[float],
                    delta_cs: list[float], delta_as: list[float], n_max: int = 3
                    ) -> list[OracleComparison]:
    """在 (g, Δc, Δa_eff) 网格上比较解析模型与精确稳态"""
    rows = []
    for g in couplings:
        for delta_c in delta_cs:
            for delta_a in delta_as:
                rows.append(compare_point(params, g, delta_c, delta_a, eta, n_max))
    worst = max((row.max_error for row in rows), default=0.0)
    logger.info(f"精确稳态比较完成: {len(rows)} 个网格点, 最大相对误差 {worst:.3e}")
    return rows


def convergence_error(params: PhysicalParams, g: float, delta_c: float, delta_a_eff: float,
                      eta: float, n_low: int, n_high: int) -> float:
    """两个光子数截断之间观测量的最大相对差"""
    floor = AppConstants.TOLERANCES['absolute_floor']
    low = observables(steady_state(OracleConfig.from_params(params, g, delta_c, delta_a_eff, eta, n_low)))
    high = observables(steady_state(OracleConfig.from_params(params, g, delta_c, delta_a_eff, eta, n_high)))
    return max(relative_error(x, y, floor) for x, y in zip(low, high))


def write_comparison_csv(path: str, rows: list[OracleComparison]) -> None:
    """写出比较表，频率以 MHz 表示"""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(AppConstants.CSV_COLUMNS['oracle_check'])
        for row in rows:
            writer.writerow([
                repr(angular_to_mhz(row.g)), repr(angular_to_mhz(row.delta_c)),
                repr(angular_to_mhz(row.delta_a_eff)), repr(row.n_empty),
                repr(row.analytic_photon_number), repr(row.oracle_photon_number),
                repr(row.analytic_excitation), repr(row.oracle_excitation),
                repr(row.err_mean_a), repr(row.err_mean_sigma), repr(row.err_photon_number),
                repr(row.err_excitation), repr(row.err_interaction), repr(row.max_error),
            ])
    logger.info(f"已写出 {path}")
