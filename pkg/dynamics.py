"""单原子动力学模块 - 场与运动的耦合积分、随机加热与加热能量账本

每一步的算符分裂：
1. 用当前场计算的总力做半步动量更新；
2. 位置漂移一整步；
3. 以中点位置冻结 g 与 Δa_eff，用 2×2 线性系统的精确矩阵指数推进 (a, σ)；
4. 用新位置与新场计算总力，再做半步动量更新；
5. 自发辐射反冲（泊松计数）与腔轴偶极力涨落（高斯）随机冲量；
6. 光阱深度噪声（分段常数）。

单步操作与整段积分共用 _Stepper 的标量运算；无探测光标定按同一顺序做向量化积分。
"""
# pyright: reportAny=false

import cmath
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Optional

import numpy as np

from constants import HBAR, AppConstants
from physics_core import (FieldState, ModelValidityError, PhysicalParams, Vec3,
                          _probe_mode_terms, _trap_mode_terms)
from utils import RandomStream, mk_to_joule, steps_for

logger = logging.getLogger(__name__)

# 轨迹记录回调：(t, x, y, z, px, py, pz, 光子数, 激发, |g|)
Recorder = Callable[[float, float, float, float, float, float, float, float, float, float], None]


class NonBracketingError(Exception):
    """标定区间无法包住目标寿命"""


@dataclass(frozen=True)
class ParticleState:
    """某一时刻的原子位置、动量与腔场/偶极振幅"""
    t: float
    r: Vec3
    p: Vec3
    field: FieldState = FieldState()

    def __post_init__(self) -> None:
        if not (math.isfinite(self.t) and self.r.is_finite() and self.p.is_finite()):
            raise ValueError(f"粒子状态含非有限值: t={self.t}, r={self.r}, p={self.p}")


@dataclass(frozen=True)
class DriveSettings:
    """探测驱动：探测-腔失谐、驱动幅度与开关"""
    delta_c: float = 0.0
    eta: float = 0.0
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise ValueError(f"驱动幅度不能为负: {self.eta}")

    @property
    def effective_eta(self) -> float:
        return self.eta if self.enabled else 0.0

    def empty_photon_number(self, params: PhysicalParams) -> float:
        """同一失谐下的空腔光子数 |η/(κ-iΔc)|²"""
        return self.effective_eta ** 2 / (params.kappa ** 2 + self.delta_c ** 2)

    def resonant_photon_number(self, params: PhysicalParams) -> float:
        """共振空腔光子数 (η/κ)²"""
        return (self.effective_eta / params.kappa) ** 2


@dataclass(frozen=True)
class TrapNoiseProcess:
    """分段常数的相对阱深涨落 ε，每 tau_noise 从 N(0, sigma_eps²) 重新抽样"""
    sigma_eps: float = 0.0
    tau_noise: float = 1e-6
    current_eps: float = 0.0
    time_to_next: float = 0.0

    def __post_init__(self) -> None:
        if self.sigma_eps < 0:
            raise ValueError(f"sigma_eps 不能为负: {self.sigma_eps}")
        if self.tau_noise <= 0:
            raise ValueError(f"tau_noise 必须为正: {self.tau_noise}")

    def depth(self, trap_depth: float) -> float:
        """瞬时阱深 (1+ε)·U0，不小于 0"""
        return trap_depth * max(0.0, 1.0 + self.current_eps)


@dataclass(frozen=True)
class HeatingBudget:
    """按通道累计的运动能量（J）

    spont_recoil、dipole_fluct、trap_noise 单调不减；trap_noise_cooling 为阱深跳变中
    放出的能量（≤0）；kick_cross_work 为随机冲量的零均值交叉项 p·δp/m；
    probe_force_work 为平均探测力做的功（有正负）。六项之和等于机械能变化（积分误差以内）。
    """
    spont_recoil: float = 0.0
    dipole_fluct: float = 0.0
    trap_noise: float = 0.0
    trap_noise_cooling: float = 0.0
    kick_cross_work: float = 0.0
    probe_force_work: float = 0.0

    def plus(self, other: 'HeatingBudget') -> 'HeatingBudget':
        return HeatingBudget(*(x + y for x, y in zip(self.as_tuple(), other.as_tuple())))

    def minus(self, other: 'HeatingBudget') -> 'HeatingBudget':
        return HeatingBudget(*(x - y for x, y in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self) -> tuple[float, ...]:
        return (self.spont_recoil, self.dipole_fluct, self.trap_noise, self.trap_noise_cooling,
                self.kick_cross_work, self.probe_force_work)

    def total(self) -> float:
        return sum(self.as_tuple())

    def probe_induced(self) -> dict[str, float]:
        """探测光引起的加热通道（平均力只计加热部分）"""
        return {
            'spont_recoil': self.spont_recoil,
            'dipole_fluct': self.dipole_fluct,
            'probe_force': max(0.0, self.probe_force_work),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'HeatingBudget':
        return cls(**data)


@dataclass(frozen=True)
class IntegratorConfig:
    """积分器配置"""
    dt: float = 1e-9
    record_stride: int = 50
    rng_seed: int = 0
    enable_diffusion: bool = True
    enable_motion: bool = True
    enable_gravity: bool = True
    excitation_limit: float = AppConstants.TOLERANCES['excitation_hard_fail']

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"步长必须为正: {self.dt}")
        if self.record_stride < 1:
            raise ValueError(f"记录间隔必须 ≥ 1: {self.record_stride}")
        if not 0 < self.excitation_limit <= AppConstants.TOLERANCES['model_validity']:
            raise ValueError(f"激发上限超出范围: {self.excitation_limit}")

    def check_stability(self, params: PhysicalParams) -> None:
        """步长稳定性检查 dt·max(g0, κ, γ) ≤ 0.5

        Raises:
            ValueError: 步长过大
        """
        product = self.dt * max(params.g0, params.kappa, params.gamma)
        if product > AppConstants.TOLERANCES['stability_guard']:
            raise ValueError(f"步长 {self.dt:g} s 超出稳定性限制 (dt·max rate = {product:.3f})")


@dataclass(frozen=True)
class SegmentSummary:
    """一段积分的时间平均观测量与加热增量"""
    duration: float
    steps: int
    mean_photon_number: float
    mean_transmission_rel: float
    mean_transmission: float
    mean_coupling: float
    max_excitation: float
    budget: HeatingBudget
    axial_histogram: tuple[int, ...]
    noise: TrapNoiseProcess
    loss_time: Optional[float] = None

    @property
    def n_samples(self) -> int:
        return sum(self.axial_histogram)


# ---------------------------------------------------------------------------
# 场传播
# ---------------------------------------------------------------------------

def _propagate_field(a: complex, s: complex, g: float, delta_c: float, delta_a: float,
                     eta: float, kappa: float, gamma: float, dt: float) -> tuple[complex, complex]:
    """精确推进 ẋ = M x + b，x = (a, σ)，b = (η, 0)

    M = [[iΔc-κ, -ig], [-ig, iΔa-γ]]；x(dt) = x* + exp(M dt)(x - x*)，x* 为不动点。
    """
    m00 = complex(-kappa, delta_c)
    m11 = complex(-gamma, delta_a)
    m01 = -1j * g
    det = m00 * m11 - m01 * m01
    a_star = -m11 * eta / det
    s_star = m01 * eta / det

    mean = 0.5 * (m00 + m11)
    half = 0.5 * (m00 - m11)
    root = cmath.sqrt(half * half + m01 * m01)
    arg = root * dt
    if abs(arg) < 1e-6:
        ch = 1.0 + 0.5 * arg * arg
        sh_over = dt * (1.0 + arg * arg / 6.0)
    else:
        ch = cmath.cosh(arg)
        sh_over = cmath.sinh(arg) / root
    decay = cmath.exp(mean * dt)

    da = a - a_star
    ds = s - s_star
    a_new = a_star + decay * (ch * da + sh_over * (half * da + m01 * ds))
    s_new = s_star + decay * (ch * ds + sh_over * (m01 * da - half * ds))
    return a_new, s_new


# ---------------------------------------------------------------------------
# 单步积分核心
# ---------------------------------------------------------------------------

def _noise_tick(eps: float, time_to_next: float, sigma_eps: float, tau: float, dt: float,
                rng: RandomStream) -> tuple[float, float]:
    """阱深噪声推进一步，返回 (ε, 距下次抽样的时间)"""
    if time_to_next <= 0.5 * dt:
        eps = sigma_eps * rng.normal() if sigma_eps > 0.0 else 0.0
        time_to_next += tau
    return eps, time_to_next - dt


class _Stepper:
    """标量形式的单步积分状态

    simulate_segment 的内循环与 field_update、motion_step、stochastic_kick 共用这里的方法，
    状态保存在 __slots__ 属性里，避免每步构造对象。
    """
    __slots__ = ('params', 'x', 'y', 'z', 'px', 'py', 'pz', 'a', 's',
                 'base_depth', 'depth', 'eps', 'time_to_next', 'sigma_eps', 'tau',
                 'psi', 'grad2', 'intensity', 'dix', 'diy', 'diz',
                 'fpx', 'fpy', 'fpz', 'fx', 'fy', 'fz',
                 'spont', 'dipole', 'cross', 'noise_heat', 'noise_cool', 'probe_work',
                 'inv_m', 'kp', 'kt', 'inv_w2', 'g0', 'kappa', 'gamma', 'stark_coeff',
                 'delta_c', 'base_delta_a', 'eta', 'weight', 'recoil', 'diff_coeff', 'two_hbar_g0')

    def __init__(self, state: ParticleState, drive: DriveSettings, trap_depth: float,
                 noise: TrapNoiseProcess, params: PhysicalParams, gravity: bool = True) -> None:
        m = params.atom_mass
        self.params = params
        self.inv_m = 1.0 / m
        self.kp = params.k_probe
        self.kt = params.k_trap
        self.inv_w2 = 1.0 / params.waist ** 2
        self.g0 = params.g0
        self.kappa = params.kappa
        self.gamma = params.gamma
        self.stark_coeff = params.stark_per_depth / HBAR
        self.delta_c = drive.delta_c
        self.base_delta_a = drive.delta_c + params.delta_a0
        self.eta = drive.effective_eta
        self.weight = m * params.gravity if gravity else 0.0
        self.recoil = params.recoil_momentum
        self.diff_coeff = 2.0 * HBAR * HBAR * params.g0 * params.g0 * params.gamma
        self.two_hbar_g0 = 2.0 * HBAR * params.g0

        self.x, self.y, self.z = state.r
        self.px, self.py, self.pz = state.p
        self.a = state.field.a
        self.s = state.field.sigma
        self.base_depth = trap_depth
        self.sigma_eps = noise.sigma_eps
        self.tau = noise.tau_noise
        self.eps = noise.current_eps
        self.time_to_next = noise.time_to_next
        self.depth = trap_depth * max(0.0, 1.0 + self.eps)

        self.spont = self.dipole = self.cross = 0.0
        self.noise_heat = self.noise_cool = self.probe_work = 0.0
        self.refresh_forces()

    def refresh_forces(self) -> None:
        """在当前位置用当前场重算模式函数与总力"""
        psi, dpx, dpy, dpz = _probe_mode_terms(self.x, self.y, self.z, self.kp, self.inv_w2)
        intensity, self.dix, self.diy, self.diz = _trap_mode_terms(self.x, self.y, self.z, self.kt,
                                                                   self.inv_w2)
        self.psi = psi
        self.intensity = intensity
        self.grad2 = dpx * dpx + dpy * dpy + dpz * dpz
        factor = -self.two_hbar_g0 * (self.a.conjugate() * self.s).real
        self.fpx, self.fpy, self.fpz = factor * dpx, factor * dpy, factor * dpz
        self._apply_depth()

    def _apply_depth(self) -> None:
        depth = self.depth
        self.fx = depth * self.dix + self.fpx
        self.fy = depth * self.diy + self.fpy - self.weight
        self.fz = depth * self.diz + self.fpz

    def propagate_field(self, xm: float, ym: float, zm: float, dt: float) -> None:
        """g 与 Δa_eff 冻结在给定位置，精确推进 (a, σ)"""
        envelope = math.exp(-(ym * ym + zm * zm) * self.inv_w2)
        cos_t = math.cos(self.kt * xm)
        g = self.g0 * math.cos(self.kp * xm) * envelope
        stark = self.stark_coeff * self.depth * cos_t * cos_t * envelope * envelope
        self.a, self.s = _propagate_field(self.a, self.s, g, self.delta_c, self.base_delta_a - stark,
                                          self.eta, self.kappa, self.gamma, dt)

    def verlet(self, dt: float, motion: bool = True, propagate: bool = True) -> None:
        """半步动量、漂移、中点场推进、新位置的力、半步动量

        平均探测力的功按梯形公式累计。motion 为 False 时原子不动，只推进场。
        """
        h = 0.5 * dt
        x, y, z = self.x, self.y, self.z
        if motion:
            self.px += self.fx * h
            self.py += self.fy * h
            self.pz += self.fz * h
            xn = x + self.px * self.inv_m * dt
            yn = y + self.py * self.inv_m * dt
            zn = z + self.pz * self.inv_m * dt
        else:
            xn, yn, zn = x, y, z
        if propagate:
            self.propagate_field(0.5 * (x + xn), 0.5 * (y + yn), 0.5 * (z + zn), dt)
        fpx, fpy, fpz = self.fpx, self.fpy, self.fpz
        self.x, self.y, self.z = xn, yn, zn
        self.refresh_forces()
        if motion:
            self.probe_work += 0.5 * ((fpx + self.fpx) * (xn - x) + (fpy + self.fpy) * (yn - y)
                                      + (fpz + self.fpz) * (zn - z))
            self.px += self.fx * h
            self.py += self.fy * h
            self.pz += self.fz * h

    def kick(self, dt: float, rng: RandomStream, delta_a: Optional[float] = None) -> None:
        """自发辐射反冲（泊松计数、各向同性）与腔轴偶极力涨落（高斯）

        每次冲量的动能变化拆为扩散项 |δp|²/2m 与交叉项 p·δp/m。
        delta_a 缺省时取当前位置与阱深下的 Δa_eff。
        """
        inv_m = self.inv_m
        inv_2m = 0.5 * inv_m
        s = self.s
        lam = 2.0 * self.gamma * (s.real * s.real + s.imag * s.imag) * dt
        if lam > 0.0:
            recoil = self.recoil
            for _ in range(rng.poisson(lam)):
                ux, uy, uz = rng.unit_vector()
                kx, ky, kz = recoil * ux, recoil * uy, recoil * uz
                self.cross += (self.px * kx + self.py * ky + self.pz * kz) * inv_m
                self.spont += recoil * recoil * inv_2m
                self.px += kx
                self.py += ky
                self.pz += kz
        a = self.a
        photons = a.real * a.real + a.imag * a.imag
        if photons > 0.0:
            if delta_a is None:
                delta_a = self.base_delta_a - self.stark_coeff * self.depth * self.intensity
            diffusion = (self.diff_coeff * self.grad2 * photons
                         / (self.gamma * self.gamma + delta_a * delta_a))
            if diffusion > 0.0:
                kick = math.sqrt(2.0 * diffusion * dt) * rng.normal()
                self.cross += self.px * kick * inv_m
                self.dipole += kick * kick * inv_2m
                self.px += kick

    def tick_noise(self, dt: float, rng: RandomStream) -> None:
        """阱深噪声推进一步；ε 改变时把势能跃变计入加热或冷却通道"""
        eps, self.time_to_next = _noise_tick(self.eps, self.time_to_next, self.sigma_eps, self.tau, dt, rng)
        if eps != self.eps:
            new_depth = self.base_depth * max(0.0, 1.0 + eps)
            work = -(new_depth - self.depth) * self.intensity
            if work >= 0.0:
                self.noise_heat += work
            else:
                self.noise_cool += work
            self.depth = new_depth
            self.eps = eps
            self._apply_depth()

    @property
    def excitation(self) -> float:
        return self.s.real * self.s.real + self.s.imag * self.s.imag

    @property
    def photons(self) -> float:
        return self.a.real * self.a.real + self.a.imag * self.a.imag

    def position(self) -> Vec3:
        return Vec3(self.x, self.y, self.z)

    def momentum(self) -> Vec3:
        return Vec3(self.px, self.py, self.pz)

    def budget(self) -> HeatingBudget:
        return HeatingBudget(self.spont, self.dipole, self.noise_heat, self.noise_cool, self.cross,
                             self.probe_work)

    def noise_process(self) -> TrapNoiseProcess:
        return TrapNoiseProcess(sigma_eps=self.sigma_eps, tau_noise=self.tau, current_eps=self.eps,
                                time_to_next=self.time_to_next)


# ---------------------------------------------------------------------------
# 单步操作
# ---------------------------------------------------------------------------

def field_update(state: ParticleState, drive: DriveSettings, trap_depth: float, dt: float,
                 params: PhysicalParams) -> FieldState:
    """推进腔场与原子偶极一个步长

    g 与 Δa_eff 冻结在中点位置 r + p·dt/(2m)。

    Args:
        state: 当前状态
        drive: 驱动设置
        trap_depth: 瞬时峰值阱深（J）
        dt: 步长（s）
        params: 物理参数

    Returns:
        FieldState: 新的场

    Raises:
        ValueError: 阱深为负
        ModelValidityError: |σ|² > 0.5
    """
    if trap_depth < 0:
        raise ValueError(f"阱深不能为负: {trap_depth}")
    stepper = _Stepper(state, drive, trap_depth, TrapNoiseProcess(), params)
    shift = 0.5 * dt / params.atom_mass
    stepper.propagate_field(state.r.x + state.p.x * shift, state.r.y + state.p.y * shift,
                            state.r.z + state.p.z * shift, dt)
    return FieldState(stepper.a, stepper.s)


def motion_step(state: ParticleState, trap_depth: float, dt: float, params: PhysicalParams,
                drive: Optional[DriveSettings] = None, gravity: bool = True) -> tuple[Vec3, Vec3]:
    """速度 Verlet 一步（光阱力 + 探测偶极力 + 重力）

    给出 drive 时，第二个半步的力使用在新旧位置中点推进后的场（与 simulate_segment 相同）；
    否则场保持冻结。

    Returns:
        tuple[Vec3, Vec3]: 新位置与新动量
    """
    stepper = _Stepper(state, drive or DriveSettings(), trap_depth, TrapNoiseProcess(), params, gravity)
    stepper.verlet(dt, propagate=drive is not None)
    return stepper.position(), stepper.momentum()


def stochastic_kick(state: ParticleState, dt: float, rng: RandomStream, params: PhysicalParams,
                    delta_a_eff: float, budget: Optional[HeatingBudget] = None
                    ) -> tuple[Vec3, HeatingBudget]:
    """随机动量冲量：泊松计数的各向同性自发辐射反冲 + 腔轴高斯偶极涨落

    每次冲量的动能变化拆为扩散项 |δp|²/2m（记入对应通道）与交叉项 p·δp/m。

    Returns:
        tuple[Vec3, HeatingBudget]: 新动量与更新后的账本
    """
    stepper = _Stepper(state, DriveSettings(), 0.0, TrapNoiseProcess(), params)
    stepper.kick(dt, rng, delta_a_eff)
    return stepper.momentum(), (budget or HeatingBudget()).plus(stepper.budget())


def trap_noise_step(proc: TrapNoiseProcess, dt: float, rng: RandomStream) -> TrapNoiseProcess:
    """推进阱深噪声一个步长；到期时重新抽样 ε"""
    eps, remaining = _noise_tick(proc.current_eps, proc.time_to_next, proc.sigma_eps, proc.tau_noise,
                                 dt, rng)
    return replace(proc, current_eps=eps, time_to_next=remaining)


def mechanical_energy(r: Vec3, p: Vec3, trap_depth: float, params: PhysicalParams,
                      gravity: bool = True) -> float:
    """动能 + 光阱势能（+ 重力势能）"""
    energy = 0.5 * p.norm2() / params.atom_mass
    energy -= trap_depth * _trap_mode_terms(r.x, r.y, r.z, params.k_trap, 1.0 / params.waist ** 2)[0]
    if gravity:
        energy += params.atom_mass * params.gravity * r.y
    return energy


def fold_axial(x: float, params: PhysicalParams) -> float:
    """把腔轴位置折叠到最近光阱波腹附近 [-λt/4, λt/4]"""
    period = 0.5 * params.lambda_trap
    return x - period * round(x / period)


def _histogram_bin(x: float, params: PhysicalParams, n_bins: int) -> int:
    quarter = 0.25 * params.lambda_trap
    index = int((fold_axial(x, params) + quarter) / (2.0 * quarter) * n_bins)
    return min(max(index, 0), n_bins - 1)


# ---------------------------------------------------------------------------
# 整段积分
# ---------------------------------------------------------------------------

def simulate_segment(state: ParticleState, duration: float, drive: DriveSettings, trap_depth: float,
                     noise: TrapNoiseProcess, config: IntegratorConfig, rng: RandomStream,
                     params: PhysicalParams, recorder: Optional[Recorder] = None
                     ) -> tuple[ParticleState, SegmentSummary, bool]:
    """推进完整的耦合系统 duration 时长

    每步依次为 Verlet 运动与中点场推进、随机冲量、阱深噪声。
    原子离开判据：光阱内能量（动能 + 光阱势能）大于 0 且径向位置超过 2w0 并向外运动，
    或 |x| > 20λ。离开后立即停止积分。

    Args:
        state: 初始状态
        duration: 时长（s），须为步长整数倍
        drive: 驱动设置
        trap_depth: 峰值阱深 U0（J）
        noise: 阱深噪声过程
        config: 积分器配置
        rng: 随机数流
        params: 物理参数
        recorder: 可选的轨迹记录回调

    Returns:
        tuple[ParticleState, SegmentSummary, bool]: 新状态、段摘要、是否离开

    Raises:
        ValueError: 时长或步长不合法
        ModelValidityError: 原子激发超过上限
    """
    if duration <= 0:
        raise ValueError(f"时长必须为正: {duration}")
    config.check_stability(params)
    n_steps = steps_for(duration, config.dt)
    dt = config.dt
    inv_2m = 0.5 / params.atom_mass
    limit = config.excitation_limit
    motion = config.enable_motion
    diffusion_on = config.enable_diffusion and motion
    escape_radius2 = 4.0 * params.waist ** 2
    escape_axial = 20.0 * params.lambda_probe
    n_bins = AppConstants.ANALYSIS_CONFIG['localization_bins']
    stride = config.record_stride
    g0 = params.g0

    t0 = state.t
    stepper = _Stepper(state, drive, trap_depth, noise, params, config.enable_gravity)
    sum_n = 0.0
    sum_g = 0.0
    max_exc = stepper.excitation
    histogram = [0] * n_bins
    loss_time = None
    exited = False

    steps_done = 0
    for step in range(n_steps):
        stepper.verlet(dt, motion=motion)
        exc = stepper.excitation
        if exc > limit:
            raise ModelValidityError(f"t={t0 + (step + 1) * dt:.6e} s 原子激发 {exc:.4f} 超过上限 {limit}")
        photons = stepper.photons
        if diffusion_on:
            stepper.kick(dt, rng)
        stepper.tick_noise(dt, rng)

        # 观测量
        steps_done = step + 1
        sum_n += photons
        g_abs = abs(g0 * stepper.psi)
        sum_g += g_abs
        if exc > max_exc:
            max_exc = exc
        if steps_done % stride == 0:
            histogram[_histogram_bin(stepper.x, params, n_bins)] += 1
            if recorder is not None:
                recorder(t0 + steps_done * dt, stepper.x, stepper.y, stepper.z,
                         stepper.px, stepper.py, stepper.pz, photons, exc, g_abs)

        # 离开判据
        if motion:
            x, y, z = stepper.x, stepper.y, stepper.z
            px, py, pz = stepper.px, stepper.py, stepper.pz
            if abs(x) > escape_axial:
                exited = True
            elif y * y + z * z > escape_radius2 and (y * py + z * pz) > 0.0:
                if (px * px + py * py + pz * pz) * inv_2m - stepper.depth * stepper.intensity > 0.0:
                    exited = True
            if exited:
                loss_time = t0 + steps_done * dt
                break

    new_state = ParticleState(t=t0 + steps_done * dt, r=stepper.position(), p=stepper.momentum(),
                              field=FieldState(stepper.a, stepper.s))
    mean_n = sum_n / steps_done
    empty_n = drive.empty_photon_number(params)
    resonant_n = drive.resonant_photon_number(params)
    summary = SegmentSummary(
        duration=steps_done * dt,
        steps=steps_done,
        mean_photon_number=mean_n,
        mean_transmission_rel=mean_n / empty_n if empty_n > 0 else 0.0,
        mean_transmission=mean_n / resonant_n if resonant_n > 0 else 0.0,
        mean_coupling=sum_g / steps_done,
        max_excitation=max_exc,
        budget=stepper.budget(),
        axial_histogram=tuple(histogram),
        noise=stepper.noise_process(),
        loss_time=loss_time,
    )
    return new_state, summary, exited


# ---------------------------------------------------------------------------
# 无探测光储存寿命与阱深噪声标定
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationFixture:
    """无探测光储存寿命测量的设定"""
    trap_depth: float = mk_to_joule(1.6)
    n_atoms: int = 200
    temperature: float = mk_to_joule(0.2)
    dt: float = 25e-9
    horizon_factor: float = 2.5
    tau_noise: float = 1e-6
    seed: int = 0
    lifetime_tolerance: float = AppConstants.TOLERANCES['lifetime_relative']

    def __post_init__(self) -> None:
        if self.n_atoms < 1 or self.trap_depth <= 0 or self.temperature <= 0:
            raise ValueError("标定设定的原子数、阱深与温度必须为正")
        if self.dt <= 0 or self.horizon_factor <= 1.0 or self.tau_noise <= 0:
            raise ValueError("标定设定的步长、观测窗口倍数与噪声相关时间不合法")


@dataclass(frozen=True)
class StorageMeasurement:
    """一次储存寿命测量"""
    sigma_eps: float
    lifetime: float
    n_lost: int
    n_atoms: int
    horizon: float


@dataclass(frozen=True)
class CalibrationResult:
    """阱深噪声标定结果"""
    sigma_eps: float
    lifetime: float
    target_lifetime: float
    evaluations: tuple[StorageMeasurement, ...]


def sample_thermal_atoms(fixture: CalibrationFixture, params: PhysicalParams,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """在阱中心按谐振近似热分布抽样，只保留束缚（光阱内能量 < 0）的原子

    Returns:
        tuple[np.ndarray, np.ndarray]: 位置与动量，形状 (n, 3)
    """
    m = params.atom_mass
    depth = fixture.trap_depth
    omega_axial = params.k_trap * math.sqrt(2.0 * depth / m)
    omega_radial = math.sqrt(4.0 * depth / (m * params.waist ** 2))
    kt = fixture.temperature
    pos_scale = np.array([math.sqrt(kt / m) / omega_axial, math.sqrt(kt / m) / omega_radial,
                          math.sqrt(kt / m) / omega_radial])
    mom_scale = math.sqrt(m * kt)

    positions = np.empty((0, 3))
    momenta = np.empty((0, 3))
    while positions.shape[0] < fixture.n_atoms:
        batch = 2 * fixture.n_atoms
        r = rng.standard_normal((batch, 3)) * pos_scale
        p = rng.standard_normal((batch, 3)) * mom_scale
        intensity = np.cos(params.k_trap * r[:, 0]) ** 2 * np.exp(-2.0 * (r[:, 1] ** 2 + r[:, 2] ** 2) / params.waist ** 2)
        bound = 0.5 * np.sum(p * p, axis=1) / m - depth * intensity < 0.0
        positions = np.vstack([positions, r[bound]])
        momenta = np.vstack([momenta, p[bound]])
    return positions[:fixture.n_atoms], momenta[:fixture.n_atoms]


@dataclass(frozen=True)
class EnsembleRun:
    """整批原子的终态与丢失时刻（未丢失为 inf）"""
    positions: np.ndarray
    momenta: np.ndarray
    loss_time: np.ndarray


def propagate_ensemble(positions: np.ndarray, momenta: np.ndarray, sigma_eps: float, duration: float,
                       fixture: CalibrationFixture, params: PhysicalParams,
                       rng: np.random.Generator) -> EnsembleRun:
    """无探测光时整批原子的向量化 Verlet 积分（光阱力 + 重力 + 阱深噪声）

    每步的运算顺序与 simulate_segment 相同：Verlet 一步后推进阱深噪声，
    第 0 步末起每 tau_noise 对每个原子独立重新抽样 ε。离开判据每 10 步检查一次。

    Args:
        positions: 初始位置，形状 (n, 3)
        momenta: 初始动量，形状 (n, 3)
        sigma_eps: 相对阱深涨落
        duration: 时长（s）
        fixture: 测量设定（阱深、步长、噪声相关时间）
        params: 物理参数
        rng: numpy 随机数生成器

    Returns:
        EnsembleRun: 终态与丢失时刻
    """
    x, y, z = (positions[:, i].astype(float) for i in range(3))
    px, py, pz = (momenta[:, i].astype(float) for i in range(3))
    n = positions.shape[0]

    inv_m = 1.0 / params.atom_mass
    dt = fixture.dt
    h = 0.5 * dt
    kt = params.k_trap
    inv_w2 = 1.0 / params.waist ** 2
    weight = params.atom_mass * params.gravity
    n_steps = max(1, int(math.ceil(duration / dt - 1e-9)))
    noise_every = max(1, int(round(fixture.tau_noise / dt)))
    check_every = 10
    escape_radius2 = 4.0 * params.waist ** 2
    escape_axial = 20.0 * params.lambda_probe

    loss_time = np.full(n, np.inf)
    alive = np.ones(n, dtype=bool)
    depth = np.full(n, fixture.trap_depth)

    def forces() -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        envelope = np.exp(-2.0 * (y * y + z * z) * inv_w2)
        c = np.cos(kt * x)
        intensity = c * c * envelope
        fx = depth * (-kt * np.sin(2.0 * (kt * x)) * envelope)
        fy = depth * (-4.0 * y * inv_w2 * intensity) - weight
        fz = depth * (-4.0 * z * inv_w2 * intensity)
        return fx, fy, fz, intensity

    fx, fy, fz, intensity = forces()
    for step in range(n_steps):
        px += fx * h
        py += fy * h
        pz += fz * h
        x += px * inv_m * dt
        y += py * inv_m * dt
        z += pz * inv_m * dt
        fx, fy, fz, intensity = forces()
        px += fx * h
        py += fy * h
        pz += fz * h
        if step % noise_every == 0 and sigma_eps > 0.0:
            depth = fixture.trap_depth * np.maximum(0.0, 1.0 + sigma_eps * rng.standard_normal(n))
            fx, fy, fz, intensity = forces()

        if (step + 1) % check_every == 0:
            energy = 0.5 * (px * px + py * py + pz * pz) * inv_m - depth * intensity
            outward = (y * py + z * pz) > 0.0
            lost = alive & (((y * y + z * z > escape_radius2) & outward & (energy > 0.0))
                            | (np.abs(x) > escape_axial))
            if np.any(lost):
                loss_time[lost] = (step + 1) * dt
                alive &= ~lost
                if not np.any(alive):
                    break

    return EnsembleRun(positions=np.column_stack([x, y, z]), momenta=np.column_stack([px, py, pz]),
                       loss_time=loss_time)


def measure_storage_time(sigma_eps: float, target_lifetime: float, fixture: CalibrationFixture,
                         params: PhysicalParams) -> StorageMeasurement:
    """无探测光、只有光阱与阱深噪声时的平均储存时间

    观测窗口为 horizon_factor × target_lifetime。
    同一 fixture.seed 在不同 sigma_eps 下使用相同的初始样本与噪声序列。
    寿命用截尾指数分布的最大似然估计 Σ min(T, H) / 丢失数；无原子丢失时为无穷大。
    """
    rng = np.random.default_rng(np.random.SeedSequence(fixture.seed))
    positions, momenta = sample_thermal_atoms(fixture, params, rng)
    horizon = fixture.horizon_factor * target_lifetime
    run = propagate_ensemble(positions, momenta, sigma_eps, horizon, fixture, params, rng)

    n = fixture.n_atoms
    n_lost = int(np.sum(np.isfinite(run.loss_time)))
    exposure = float(np.sum(np.minimum(run.loss_time, horizon)))
    lifetime = exposure / n_lost if n_lost > 0 else float('inf')
    logger.debug(f"储存寿命: sigma_eps={sigma_eps:.4g}, 丢失 {n_lost}/{n}, 寿命 {lifetime:.4g} s")
    return StorageMeasurement(sigma_eps=sigma_eps, lifetime=lifetime, n_lost=n_lost, n_atoms=n,
                              horizon=horizon)


def calibrate_trap_noise(target_lifetime: float, fixture: CalibrationFixture, params: PhysicalParams,
                         initial_guess: Optional[float] = None) -> CalibrationResult:
    """二分（对数尺度）阱深噪声幅度，使无探测光储存时间等于目标值（相对容差内）

    Args:
        target_lifetime: 目标寿命（s）
        fixture: 测量设定
        params: 物理参数
        initial_guess: 已有的 sigma_eps，满足容差时直接采用

    Returns:
        CalibrationResult: 标定结果

    Raises:
        ValueError: 目标寿命不为正
        NonBracketingError: 区间两端无法包住目标
    """
    if not target_lifetime > 0:
        raise ValueError(f"目标寿命必须为正: {target_lifetime}")
    if not math.isfinite(target_lifetime):
        raise NonBracketingError("目标寿命为无穷大，无法达到")
    tol = fixture.lifetime_tolerance
    cal = AppConstants.CALIBRATION_CONFIG
    evaluations: list[StorageMeasurement] = []

    def measure(sigma: float) -> StorageMeasurement:
        result = measure_storage_time(sigma, target_lifetime, fixture, params)
        evaluations.append(result)
        logger.info(f"标定: sigma_eps={sigma:.5g} -> 寿命 {result.lifetime * 1e3:.3f} ms "
                    f"({result.n_lost}/{result.n_atoms} 丢失)")
        return result

    def within(result: StorageMeasurement) -> bool:
        return abs(result.lifetime - target_lifetime) <= tol * target_lifetime

    if initial_guess is not None and initial_guess > 0:
        guess = measure(initial_guess)
        if within(guess):
            return CalibrationResult(initial_guess, guess.lifetime, target_lifetime, tuple(evaluations))

    quiet = measure(cal['sigma_low'])
    if quiet.lifetime < target_lifetime * (1.0 - tol):
        raise NonBracketingError(
            f"无噪声时寿命 {quiet.lifetime:.4g} s 已低于目标 {target_lifetime:.4g} s，存在其他主导丢失通道")
    noisy = measure(cal['sigma_high'])
    if noisy.lifetime > target_lifetime * (1.0 + tol):
        raise NonBracketingError(
            f"sigma_eps={cal['sigma_high']} 时寿命 {noisy.lifetime:.4g} s 仍高于目标 {target_lifetime:.4g} s")
    if within(noisy):
        return CalibrationResult(cal['sigma_high'], noisy.lifetime, target_lifetime, tuple(evaluations))

    low, high = cal['sigma_floor'], cal['sigma_high']
    best = noisy
    for _ in range(cal['max_iterations']):
        mid = math.sqrt(low * high)
        result = measure(mid)
        if abs(result.lifetime - target_lifetime) < abs(best.lifetime - target_lifetime):
            best = result
        if within(result):
            break
        if result.lifetime > target_lifetime:
            low = mid
        else:
            high = mid
    else:
        logger.warning(f"标定未在 {cal['max_iterations']} 次内收敛，采用最接近的值 {best.sigma_eps:.5g}")
    return CalibrationResult(best.sigma_eps, best.lifetime, target_lifetime, tuple(evaluations))
