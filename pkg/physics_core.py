"""原子-腔-光阱物理核心模块 - 模式几何、耦合、Stark 频移、弱驱动稳态与力

所有函数均为纯函数，可任意并发调用。内部单位一律为 SI，频率为角频率（rad/s）。
坐标约定：x 为腔轴，y 竖直向上（重力沿 -y），z 为水平横向；x=0 为腔中心，
探测光与光阱驻波的波腹在此重合。
"""
# pyright: reportAny=false

import math
from dataclasses import dataclass, field
from typing import NamedTuple

from constants import AMU, HBAR, RB85_MASS_AMU, AppConstants
from utils import mhz_to_angular, mk_to_joule


class ModelValidityError(Exception):
    """弱激发模型失效（|sigma|^2 超出有效范围）"""


def _default_stark_per_depth() -> float:
    # kB * 1.6 mK 的峰值阱深对应 2π × 35 MHz 的峰值 Stark 频移
    return mhz_to_angular(35.0) / (mk_to_joule(1.6) / HBAR)


@dataclass(frozen=True)
class PhysicalParams:
    """原子-腔-光阱系统的全部物理参数（SI）"""
    g0: float = mhz_to_angular(16.0)
    gamma: float = mhz_to_angular(3.0)
    kappa: float = mhz_to_angular(1.4)
    lambda_probe: float = 780.2e-9
    lambda_trap: float = 785.3e-9
    waist: float = 29e-6
    cavity_length: float = 122e-6
    finesse: float = 4.4e5
    atom_mass: float = RB85_MASS_AMU * AMU
    delta_a0: float = mhz_to_angular(35.0)
    stark_per_depth: float = field(default_factory=_default_stark_per_depth)
    gravity: float = 9.81

    def __post_init__(self) -> None:
        positive = {
            'g0': self.g0, 'gamma': self.gamma, 'kappa': self.kappa,
            'lambda_probe': self.lambda_probe, 'lambda_trap': self.lambda_trap,
            'waist': self.waist, 'cavity_length': self.cavity_length,
            'finesse': self.finesse, 'atom_mass': self.atom_mass,
            'stark_per_depth': self.stark_per_depth,
        }
        for name, value in positive.items():
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"参数 {name} 必须为有限正数: {value}")
        if not (self.g0 > self.gamma and self.g0 > self.kappa):
            raise ValueError("要求强耦合: g0 > gamma 且 g0 > kappa")
        if not self.lambda_trap > self.lambda_probe:
            raise ValueError("光阱波长必须长于探测波长（红失谐）")
        if not (math.isfinite(self.delta_a0) and math.isfinite(self.gravity) and self.gravity >= 0):
            raise ValueError("delta_a0 与 gravity 必须为有限值，gravity 不能为负")

    @property
    def k_probe(self) -> float:
        return 2.0 * math.pi / self.lambda_probe

    @property
    def k_trap(self) -> float:
        return 2.0 * math.pi / self.lambda_trap

    @property
    def recoil_momentum(self) -> float:
        """单光子反冲动量 ħk"""
        return HBAR * self.k_probe


class Vec3(NamedTuple):
    """三维矢量：位置（m）、动量（kg·m/s）或力（N）"""
    x: float
    y: float
    z: float

    def is_finite(self) -> bool:
        return math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)

    def norm2(self) -> float:
        return self.x * self.x + self.y * self.y + self.z * self.z


ORIGIN = Vec3(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class FieldState:
    """腔场振幅 a 与原子偶极振幅 sigma（单位为 √光子数）"""
    a: complex = 0j
    sigma: complex = 0j

    def __post_init__(self) -> None:
        if abs(self.sigma) ** 2 > AppConstants.TOLERANCES['model_validity']:
            raise ModelValidityError(f"原子激发 {abs(self.sigma) ** 2:.3g} 超出弱激发模型有效范围")

    @property
    def photon_number(self) -> float:
        return abs(self.a) ** 2

    @property
    def excitation(self) -> float:
        return abs(self.sigma) ** 2


@dataclass(frozen=True)
class SteadyStateResponse:
    """弱驱动稳态响应

    transmission_rel 以相同失谐下的空腔透射归一；transmission 以共振空腔透射 (η/κ)^2 归一，
    总在 [0, 1] 内。
    """
    field: FieldState
    transmission_rel: float
    transmission: float
    photon_number: float
    excitation: float


# ---------------------------------------------------------------------------
# 模式几何
# ---------------------------------------------------------------------------

def _probe_mode_terms(x: float, y: float, z: float, k: float, inv_w2: float
                      ) -> tuple[float, float, float, float]:
    """探测模式函数及其梯度 (ψ, ∂ψ/∂x, ∂ψ/∂y, ∂ψ/∂z)"""
    envelope = math.exp(-(y * y + z * z) * inv_w2)
    kx = k * x
    psi = math.cos(kx) * envelope
    return (psi,
            -k * math.sin(kx) * envelope,
            -2.0 * y * inv_w2 * psi,
            -2.0 * z * inv_w2 * psi)


def _trap_mode_terms(x: float, y: float, z: float, k: float, inv_w2: float
                     ) -> tuple[float, float, float, float]:
    """光阱强度分布及其梯度 (I, ∂I/∂x, ∂I/∂y, ∂I/∂z)"""
    envelope = math.exp(-2.0 * (y * y + z * z) * inv_w2)
    kx = k * x
    c = math.cos(kx)
    intensity = c * c * envelope
    return (intensity,
            -k * math.sin(2.0 * kx) * envelope,
            -4.0 * y * inv_w2 * intensity,
            -4.0 * z * inv_w2 * intensity)


def probe_mode_value(r: Vec3, params: PhysicalParams) -> float:
    """探测模式函数 ψp(r) = cos(kp x)·exp(-(y²+z²)/w0²)，取值 [-1, 1]"""
    return _probe_mode_terms(r.x, r.y, r.z, params.k_probe, 1.0 / params.waist ** 2)[0]


def trap_mode_intensity(r: Vec3, params: PhysicalParams) -> float:
    """光阱归一化强度 cos²(kt x)·exp(-2(y²+z²)/w0²)，取值 [0, 1]"""
    return _trap_mode_terms(r.x, r.y, r.z, params.k_trap, 1.0 / params.waist ** 2)[0]


def signed_coupling(r: Vec3, params: PhysicalParams) -> float:
    """带符号的耦合 g0·ψp(r)，场方程与梯度使用"""
    return params.g0 * probe_mode_value(r, params)


def coupling_gradient(r: Vec3, params: PhysicalParams) -> Vec3:
    """带符号耦合的梯度 ∇g（rad/s/m）"""
    _, dx, dy, dz = _probe_mode_terms(r.x, r.y, r.z, params.k_probe, 1.0 / params.waist ** 2)
    return Vec3(params.g0 * dx, params.g0 * dy, params.g0 * dz)


def coupling_at(r: Vec3, params: PhysicalParams) -> float:
    """位置相关的耦合强度 |g(r)|（rad/s）"""
    return abs(signed_coupling(r, params))


def stark_shift_at(r: Vec3, trap_depth_peak: float, params: PhysicalParams) -> float:
    """光阱引起的原子跃迁 Stark 频移 Δs(r)（rad/s）

    Args:
        r: 位置
        trap_depth_peak: 峰值阱深（J）
        params: 物理参数

    Returns:
        float: Δs(r) = stark_per_depth · (U0/ħ) · I(r)

    Raises:
        ValueError: 阱深为负
    """
    if trap_depth_peak < 0:
        raise ValueError(f"阱深不能为负: {trap_depth_peak}")
    return params.stark_per_depth * (trap_depth_peak / HBAR) * trap_mode_intensity(r, params)


def effective_atom_detuning(delta_c: float, stark_shift: float, params: PhysicalParams) -> float:
    """探测光相对（Stark 频移后）原子跃迁的失谐 Δa_eff = Δc + delta_a0 - Δs"""
    return delta_c + params.delta_a0 - stark_shift


def trap_power_nw(trap_depth_peak: float) -> float:
    """阱深对应的透射光阱功率（nW），仅用于显示"""
    ref = AppConstants.TRAP_POWER_REFERENCE
    return ref['power_nw'] * trap_depth_peak / mk_to_joule(ref['depth_mk'])


# ---------------------------------------------------------------------------
# 稳态响应与简正模
# ---------------------------------------------------------------------------

def weak_drive_steady_state(g: float, delta_c: float, delta_a_eff: float, eta: float,
                            params: PhysicalParams) -> SteadyStateResponse:
    """线性化（一阶弱驱动）原子-腔稳态

    Args:
        g: 耦合强度（≥0, rad/s）
        delta_c: 探测-腔失谐 ωp-ωc（rad/s）
        delta_a_eff: 探测-原子有效失谐（rad/s）
        eta: 驱动幅度（rad/s·√光子）
        params: 物理参数

    Returns:
        SteadyStateResponse: 稳态场与透射

    Raises:
        ValueError: g 或 eta 为负
        ModelValidityError: |sigma|^2 > 0.5
    """
    if g < 0 or eta < 0:
        raise ValueError(f"g 与 eta 必须非负: g={g}, eta={eta}")
    atom = complex(params.gamma, -delta_a_eff)
    cavity = complex(params.kappa, -delta_c)
    denominator = cavity * atom + g * g
    a = eta * atom / denominator
    sigma = -1j * g * a / atom
    # 比值与驱动无关，eta=0 时同样有定义
    response = abs(atom) ** 2 / abs(denominator) ** 2
    return SteadyStateResponse(
        field=FieldState(a, sigma),
        transmission_rel=abs(cavity) ** 2 * response,
        transmission=params.kappa ** 2 * response,
        photon_number=abs(a) ** 2,
        excitation=abs(sigma) ** 2,
    )


def dressed_mode_frequencies(g: float, delta_ac: float) -> tuple[float, float]:
    """简正模频率（相对原子与腔频率的平均值）

    Args:
        g: 耦合强度
        delta_ac: 原子-腔失谐 ωa_eff - ωc

    Returns:
        tuple[float, float]: (ω-, ω+) = ∓sqrt(g² + δ²/4)
    """
    half = math.hypot(g, delta_ac / 2.0)
    return -half, half


def normal_mode_detunings(g: float, stark_shift: float, params: PhysicalParams) -> tuple[float, float]:
    """在探测-腔失谐 Δc 坐标下的两个简正模位置

    δ = Δs - delta_a0 为有效原子-腔失谐，简正模位于 Δc = δ/2 + ω±。
    """
    delta_ac = stark_shift - params.delta_a0
    lower, upper = dressed_mode_frequencies(g, delta_ac)
    return delta_ac / 2.0 + lower, delta_ac / 2.0 + upper


def max_steady_excitation(params: PhysicalParams, eta: float, delta_cs: list[float],
                          stark_shift: float, n_couplings: int = 33) -> float:
    """在探测失谐列表与 [0, g0] 耦合网格上的最大稳态原子激发"""
    worst = 0.0
    for delta_c in delta_cs:
        delta_a = effective_atom_detuning(delta_c, stark_shift, params)
        for i in range(n_couplings):
            g = params.g0 * i / (n_couplings - 1)
            worst = max(worst, weak_drive_steady_state(g, delta_c, delta_a, eta, params).excitation)
    return worst


def critical_numbers(params: PhysicalParams) -> tuple[float, float]:
    """临界光子数 n0 = γ²/(2g0²) 与临界原子数 N0 = 2γκ/g0²"""
    g2 = params.g0 ** 2
    return params.gamma ** 2 / (2.0 * g2), 2.0 * params.gamma * params.kappa / g2


# ---------------------------------------------------------------------------
# 力与扩散
# ---------------------------------------------------------------------------

def probe_dipole_force(r: Vec3, field: FieldState, params: PhysicalParams) -> Vec3:
    """探测光偶极力 F = -2ħ·Re(a*σ)·∇g（带符号模式函数）"""
    factor = -2.0 * HBAR * (field.a.conjugate() * field.sigma).real
    grad = coupling_gradient(r, params)
    return Vec3(factor * grad.x, factor * grad.y, factor * grad.z)


def trap_potential(r: Vec3, trap_depth_peak: float, params: PhysicalParams) -> float:
    """光阱势能 U(r) = -U0·I(r)"""
    return -trap_depth_peak * trap_mode_intensity(r, params)


def trap_force(r: Vec3, trap_depth_peak: float, params: PhysicalParams) -> Vec3:
    """光阱保守力 F = -∇U = U0·∇I"""
    if trap_depth_peak < 0:
        raise ValueError(f"阱深不能为负: {trap_depth_peak}")
    _, dx, dy, dz = _trap_mode_terms(r.x, r.y, r.z, params.k_trap, 1.0 / params.waist ** 2)
    return Vec3(trap_depth_peak * dx, trap_depth_peak * dy, trap_depth_peak * dz)


def scattering_rate(field: FieldState, params: PhysicalParams) -> float:
    """自发辐射散射率 R = 2γ|σ|²（1/s）"""
    return 2.0 * params.gamma * field.excitation


def dipole_diffusion(r: Vec3, field: FieldState, delta_a_eff: float, params: PhysicalParams) -> float:
    """偶极力涨落的腔轴动量扩散系数 D = 2ħ²|∇g|²|a|²γ/(γ²+Δa²)"""
    grad2 = coupling_gradient(r, params).norm2()
    return 2.0 * HBAR ** 2 * grad2 * field.photon_number * params.gamma / (params.gamma ** 2 + delta_a_eff ** 2)
