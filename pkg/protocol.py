"""实验流程模块 - 喷泉注入、光子计数触发、冷却/探测交替与区间鉴定

一个原子的完整流程严格顺序执行，自带派生随机流；不同原子之间互相独立。
时间记账用整数步数，t=0 为触发时刻。
"""
# pyright: reportAny=false

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from constants import HBAR, AppConstants
from dynamics import (DriveSettings, HeatingBudget, IntegratorConfig, ParticleState, Recorder,
                      TrapNoiseProcess, simulate_segment)
from physics_core import (PhysicalParams, Vec3, effective_atom_detuning, signed_coupling,
                          stark_shift_at, weak_drive_steady_state)
from utils import RandomStream, mhz_to_angular, mk_to_joule, steps_for

logger = logging.getLogger(__name__)


class IntervalKind(str, Enum):
    """区间类型"""
    COOLING = 'cooling'
    PROBE = 'probe'


@dataclass(frozen=True)
class TriggerConfig:
    """触发探测设置"""
    bin_time: float = 10e-6
    threshold_rel: float = 0.3
    quantum_efficiency: float = 0.32
    use_shot_noise: bool = True
    eta_override: Optional[float] = mhz_to_angular(0.99)

    def __post_init__(self) -> None:
        if not 0 < self.threshold_rel < 1:
            raise ValueError(f"触发阈值必须在 (0, 1) 内: {self.threshold_rel}")
        if not 0 < self.quantum_efficiency <= 1:
            raise ValueError(f"量子效率必须在 (0, 1] 内: {self.quantum_efficiency}")
        if self.bin_time <= 0:
            raise ValueError(f"计数时间窗必须为正: {self.bin_time}")
        if self.eta_override is not None and self.eta_override < 0:
            raise ValueError(f"触发驱动幅度不能为负: {self.eta_override}")


@dataclass(frozen=True)
class ProtocolConfig:
    """俘获与谱测量流程设置（SI）"""
    cooling_duration: float = 500e-6
    probe_duration: float = 100e-6
    probe_delta_c: float = 0.0
    trap_depth_guide: float = mk_to_joule(0.4)
    trap_depth_hold: float = mk_to_joule(1.6)
    qualification_threshold: float = 0.02
    exit_threshold: float = 0.80
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    max_run_time: float = 20e-3
    eta: float = mhz_to_angular(0.44)
    probe_enabled: bool = True
    max_flight_time: float = 5e-3

    def __post_init__(self) -> None:
        if not 0 < self.qualification_threshold < self.exit_threshold < 1:
            raise ValueError("要求 0 < qualification_threshold < exit_threshold < 1")
        for name in ('cooling_duration', 'probe_duration', 'max_run_time', 'max_flight_time'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} 必须为正")
        if self.trap_depth_guide < 0 or self.trap_depth_hold < 0 or self.eta < 0:
            raise ValueError("阱深与驱动幅度不能为负")

    def cooling_drive(self) -> DriveSettings:
        return DriveSettings(delta_c=0.0, eta=self.eta, enabled=True)

    def probe_drive(self) -> DriveSettings:
        return DriveSettings(delta_c=self.probe_delta_c, eta=self.eta, enabled=self.probe_enabled)

    def trigger_drive(self) -> DriveSettings:
        eta = self.trigger.eta_override if self.trigger.eta_override is not None else self.eta
        return DriveSettings(delta_c=0.0, eta=eta, enabled=True)


@dataclass(frozen=True)
class ExperimentConfig:
    """一次原子流程所需的全部设置"""
    params: PhysicalParams = field(default_factory=PhysicalParams)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    noise: TrapNoiseProcess = field(default_factory=TrapNoiseProcess)

    def for_point(self, delta_c: float, trap_depth_hold: float) -> 'ExperimentConfig':
        """替换探测失谐与保持阱深"""
        return replace(self, protocol=replace(self.protocol, probe_delta_c=delta_c,
                                              trap_depth_hold=trap_depth_hold))


@dataclass(frozen=True)
class IntervalRecord:
    """单个冷却/探测区间的摘要

    mean_transmission_rel 以同一失谐的空腔透射归一，mean_transmission 以共振空腔透射归一。
    原子在区间内丢失后，剩余时间按空腔透射计入平均，atom_present 记为 False（原子没有在场到区间结束）。
    drive_enabled 记录该区间驱动光是否打开。
    """
    kind: IntervalKind
    start: float
    duration: float
    delta_c: float
    mean_transmission_rel: float
    mean_transmission: float
    mean_coupling: float
    qualified: bool = False
    atom_present: bool = True
    present_duration: float = 0.0
    drive_enabled: bool = True
    max_excitation: float = 0.0
    heating: HeatingBudget = field(default_factory=HeatingBudget)
    axial_histogram: tuple[int, ...] = ()

    @property
    def end(self) -> float:
        return self.start + self.duration

    def to_dict(self) -> dict:
        return {
            'kind': self.kind.value,
            'start': self.start,
            'duration': self.duration,
            'delta_c': self.delta_c,
            'mean_transmission_rel': self.mean_transmission_rel,
            'mean_transmission': self.mean_transmission,
            'mean_coupling': self.mean_coupling,
            'qualified': self.qualified,
            'atom_present': self.atom_present,
            'present_duration': self.present_duration,
            'drive_enabled': self.drive_enabled,
            'max_excitation': self.max_excitation,
            'heating': self.heating.to_dict(),
            'axial_histogram': list(self.axial_histogram),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'IntervalRecord':
        return cls(
            kind=IntervalKind(data['kind']),
            start=data['start'],
            duration=data['duration'],
            delta_c=data['delta_c'],
            mean_transmission_rel=data['mean_transmission_rel'],
            mean_transmission=data['mean_transmission'],
            mean_coupling=data['mean_coupling'],
            qualified=data['qualified'],
            atom_present=data['atom_present'],
            present_duration=data['present_duration'],
            drive_enabled=data.get('drive_enabled', True),
            max_excitation=data['max_excitation'],
            heating=HeatingBudget.from_dict(data['heating']),
            axial_histogram=tuple(data['axial_histogram']),
        )


@dataclass(frozen=True)
class AtomRunResult:
    """一个原子的完整流程结果"""
    triggered: bool
    intervals: tuple[IntervalRecord, ...]
    exit_time: float
    heating_budget: HeatingBudget
    loss_during_probe: bool
    stark_at_antinode: float
    trap_depth_hold: float
    delta_c: float
    atom_index: int = 0
    depth_index: int = 0
    detuning_index: int = 0
    loss_time: Optional[float] = None
    flight_time: float = 0.0
    max_excitation: float = 0.0
    steps: int = 0
    schema_version: int = AppConstants.SCHEMA_VERSION

    @property
    def key(self) -> tuple[int, int, int]:
        return self.depth_index, self.detuning_index, self.atom_index

    @property
    def probe_intervals(self) -> list[IntervalRecord]:
        return [iv for iv in self.intervals if iv.kind == IntervalKind.PROBE]

    @property
    def cooling_intervals(self) -> list[IntervalRecord]:
        return [iv for iv in self.intervals if iv.kind == IntervalKind.COOLING]

    def to_dict(self) -> dict:
        return {
            'schema_version': self.schema_version,
            'atom_index': self.atom_index,
            'depth_index': self.depth_index,
            'detuning_index': self.detuning_index,
            'triggered': self.triggered,
            'delta_c': self.delta_c,
            'trap_depth_hold': self.trap_depth_hold,
            'stark_at_antinode': self.stark_at_antinode,
            'exit_time': self.exit_time,
            'loss_during_probe': self.loss_during_probe,
            'loss_time': self.loss_time,
            'flight_time': self.flight_time,
            'max_excitation': self.max_excitation,
            'steps': self.steps,
            'heating_budget': self.heating_budget.to_dict(),
            'intervals': [iv.to_dict() for iv in self.intervals],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'AtomRunResult':
        version = data.get('schema_version')
        if version != AppConstants.SCHEMA_VERSION:
            raise ValueError(f"不支持的结果格式版本: {version}")
        return cls(
            triggered=data['triggered'],
            intervals=tuple(IntervalRecord.from_dict(iv) for iv in data['intervals']),
            exit_time=data['exit_time'],
            heating_budget=HeatingBudget.from_dict(data['heating_budget']),
            loss_during_probe=data['loss_during_probe'],
            stark_at_antinode=data['stark_at_antinode'],
            trap_depth_hold=data['trap_depth_hold'],
            delta_c=data['delta_c'],
            atom_index=data['atom_index'],
            depth_index=data['depth_index'],
            detuning_index=data['detuning_index'],
            loss_time=data['loss_time'],
            flight_time=data['flight_time'],
            max_excitation=data['max_excitation'],
            steps=data['steps'],
            schema_version=version,
        )


# ---------------------------------------------------------------------------
# 注入与触发
# ---------------------------------------------------------------------------

def sample_initial_atom(rng: RandomStream, params: PhysicalParams,
                        trap_depth_guide: float = mk_to_joule(0.4), eta: float = 0.0) -> ParticleState:
    """喷泉注入的初始原子

    位置：y = -2w0，x 在腔中心 ±5λp 内均匀，z 在 ±w0/2 内均匀；
    速度：v_y 在 [3, 10] cm/s 内均匀向上，v_x、v_z 为 1 cm/s 的热分布。
    腔场取该位置（导引阱 Stark 频移下）的弱驱动稳态。
    """
    x = (2.0 * rng.uniform() - 1.0) * 5.0 * params.lambda_probe
    y = -2.0 * params.waist
    z = (rng.uniform() - 0.5) * params.waist
    vy = 0.03 + 0.07 * rng.uniform()
    vx = 0.01 * rng.normal()
    vz = 0.01 * rng.normal()
    m = params.atom_mass
    r = Vec3(x, y, z)
    g = abs(signed_coupling(r, params))
    delta_a = effective_atom_detuning(0.0, stark_shift_at(r, trap_depth_guide, params), params)
    steady = weak_drive_steady_state(g, 0.0, delta_a, eta, params).field
    # 稳态按 |g| 计算，带符号耦合为负时 σ 反号
    if signed_coupling(r, params) < 0:
        steady = replace(steady, sigma=-steady.sigma)
    return ParticleState(t=0.0, r=r, p=Vec3(m * vx, m * vy, m * vz), field=steady)


def detect_counts(mean_photon_number: float, params: PhysicalParams, trigger: TriggerConfig,
                  rng: RandomStream) -> int:
    """一个计数时间窗内探测到的光子数

    期望值 q.e. × 2κ × |a|² × bin_time；打开散粒噪声时按泊松抽样，否则取整的期望值。
    """
    expected = trigger.quantum_efficiency * 2.0 * params.kappa * mean_photon_number * trigger.bin_time
    if expected <= 0.0:
        return 0
    if trigger.use_shot_noise:
        return int(rng.generator.poisson(expected))
    return int(round(expected))


@dataclass(frozen=True)
class TriggerOutcome:
    """触发阶段结果"""
    triggered: bool
    state: ParticleState
    noise: TrapNoiseProcess
    flight_time: float
    steps: int
    max_excitation: float


def run_trigger_phase(state: ParticleState, config: ExperimentConfig, rng: RandomStream,
                      noise: Optional[TrapNoiseProcess] = None) -> TriggerOutcome:
    """导引阶段：按计数时间窗监测透射，相对透射估计低于阈值时触发

    触发后阱深瞬时升到保持阱深（由调用方施加），时间清零。
    原子离开模式区域或超过最长飞行时间时判为未触发。
    """
    params = config.params
    proto = config.protocol
    trigger = proto.trigger
    drive = proto.trigger_drive()
    noise = noise or config.noise
    dt = config.integrator.dt
    bin_steps = steps_for(trigger.bin_time, dt)
    max_bins = max(1, int(proto.max_flight_time / trigger.bin_time))
    empty_counts = (trigger.quantum_efficiency * 2.0 * params.kappa
                    * drive.empty_photon_number(params) * trigger.bin_time)
    if empty_counts <= 0:
        raise ValueError("触发驱动为零，无法探测原子")

    steps = 0
    max_exc = 0.0
    for _ in range(max_bins):
        state, summary, exited = simulate_segment(state, bin_steps * dt, drive, proto.trap_depth_guide,
                                                  noise, config.integrator, rng, params)
        noise = summary.noise
        steps += summary.steps
        max_exc = max(max_exc, summary.max_excitation)
        if exited:
            break
        counts = detect_counts(summary.mean_photon_number, params, trigger, rng)
        if counts / empty_counts < trigger.threshold_rel:
            flight = steps * dt
            logger.debug(f"触发: 飞行 {flight * 1e6:.1f} us, 计数 {counts}, 空腔期望 {empty_counts:.1f}")
            return TriggerOutcome(True, replace(state, t=0.0), noise, flight, steps, max_exc)
    return TriggerOutcome(False, state, noise, steps * dt, steps, max_exc)


# ---------------------------------------------------------------------------
# 俘获序列
# ---------------------------------------------------------------------------

def compute_exit_time(intervals: tuple[IntervalRecord, ...] | list[IntervalRecord], threshold: float) -> float:
    """离开时刻：相对透射低于阈值的最后一个冷却区间的结束时刻，没有则为 0"""
    return max((iv.end for iv in intervals
                if iv.kind == IntervalKind.COOLING and iv.mean_transmission_rel < threshold), default=0.0)


def _empty_transmissions(drive: DriveSettings, params: PhysicalParams) -> tuple[float, float]:
    """空腔的 (同失谐归一, 共振归一) 透射"""
    if drive.effective_eta <= 0:
        return 0.0, 0.0
    return 1.0, params.kappa ** 2 / (params.kappa ** 2 + drive.delta_c ** 2)


def run_trapping_sequence(state: ParticleState, config: ExperimentConfig, rng: RandomStream,
                          noise: Optional[TrapNoiseProcess] = None, recorder: Optional[Recorder] = None
                          ) -> AtomRunResult:
    """冷却（Δc=0）与探测（Δc=probe_delta_c）区间交替，直到原子丢失或达到最长运行时间

    Args:
        state: 触发时刻的状态（t=0）
        config: 实验设置
        rng: 随机数流
        noise: 阱深噪声过程（延续触发阶段）
        recorder: 可选的轨迹记录回调

    Returns:
        AtomRunResult: 未经鉴定的流程结果
    """
    params = config.params
    proto = config.protocol
    dt = config.integrator.dt
    noise = noise or config.noise
    n_cool = steps_for(proto.cooling_duration, dt)
    n_probe = steps_for(proto.probe_duration, dt)
    n_total = steps_for(proto.max_run_time, dt)
    drives = {IntervalKind.COOLING: proto.cooling_drive(), IntervalKind.PROBE: proto.probe_drive()}

    intervals: list[IntervalRecord] = []
    budget = HeatingBudget()
    step_index = 0
    kind = IntervalKind.COOLING
    loss_time = None
    loss_during_probe = False
    max_exc = 0.0
    while step_index < n_total:
        n = min(n_cool if kind == IntervalKind.COOLING else n_probe, n_total - step_index)
        drive = drives[kind]
        state, summary, exited = simulate_segment(state, n * dt, drive, proto.trap_depth_hold, noise,
                                                  config.integrator, rng, params, recorder)
        noise = summary.noise
        budget = budget.plus(summary.budget)
        max_exc = max(max_exc, summary.max_excitation)

        mean_rel = summary.mean_transmission_rel
        mean_res = summary.mean_transmission
        if exited:
            remaining = n - summary.steps
            empty_rel, empty_res = _empty_transmissions(drive, params)
            mean_rel = (mean_rel * summary.steps + empty_rel * remaining) / n
            mean_res = (mean_res * summary.steps + empty_res * remaining) / n
        intervals.append(IntervalRecord(
            kind=kind,
            start=step_index * dt,
            duration=n * dt,
            delta_c=drive.delta_c,
            mean_transmission_rel=mean_rel,
            mean_transmission=mean_res,
            mean_coupling=summary.mean_coupling,
            atom_present=not exited,
            present_duration=summary.steps * dt,
            drive_enabled=drive.effective_eta > 0.0,
            max_excitation=summary.max_excitation,
            heating=summary.budget,
            axial_histogram=summary.axial_histogram if kind == IntervalKind.PROBE else (),
        ))
        step_index += n
        if exited:
            loss_time = summary.loss_time
            loss_during_probe = kind == IntervalKind.PROBE
            break
        kind = IntervalKind.PROBE if kind == IntervalKind.COOLING else IntervalKind.COOLING

    return AtomRunResult(
        triggered=True,
        intervals=tuple(intervals),
        exit_time=compute_exit_time(intervals, proto.exit_threshold),
        heating_budget=budget,
        loss_during_probe=loss_during_probe,
        stark_at_antinode=params.stark_per_depth * proto.trap_depth_hold / HBAR,
        trap_depth_hold=proto.trap_depth_hold,
        delta_c=proto.probe_delta_c,
        loss_time=loss_time,
        max_excitation=max_exc,
        steps=step_index,
    )


def qualify_intervals(result: AtomRunResult, threshold: float) -> AtomRunResult:
    """探测区间的前后两个冷却区间相对透射都低于阈值时判为强耦合（合格）"""
    intervals = list(result.intervals)
    qualified = []
    for i, iv in enumerate(intervals):
        if iv.kind != IntervalKind.PROBE:
            qualified.append(iv)
            continue
        before = intervals[i - 1] if i > 0 else None
        after = intervals[i + 1] if i + 1 < len(intervals) else None
        ok = (before is not None and after is not None
              and before.kind == IntervalKind.COOLING and after.kind == IntervalKind.COOLING
              and before.mean_transmission_rel < threshold and after.mean_transmission_rel < threshold)
        qualified.append(replace(iv, qualified=ok))
    return replace(result, intervals=tuple(qualified))


def run_atom(config: ExperimentConfig, master_seed: int, atom_index: int = 0, depth_index: int = 0,
             detuning_index: int = 0, recorder: Optional[Recorder] = None) -> AtomRunResult:
    """一个原子的完整流程：注入、触发、俘获序列与鉴定

    随机流由 (master_seed, atom_index, depth_index, detuning_index) 派生。
    """
    params = config.params
    proto = config.protocol
    rng = RandomStream.from_seed(master_seed, atom_index, depth_index, detuning_index)
    state = sample_initial_atom(rng, params, proto.trap_depth_guide, proto.trigger_drive().effective_eta)
    outcome = run_trigger_phase(state, config, rng)
    stark = params.stark_per_depth * proto.trap_depth_hold / HBAR
    if not outcome.triggered:
        logger.debug(f"原子 {atom_index} 未触发")
        return AtomRunResult(
            triggered=False, intervals=(), exit_time=0.0, heating_budget=HeatingBudget(),
            loss_during_probe=False, stark_at_antinode=stark, trap_depth_hold=proto.trap_depth_hold,
            delta_c=proto.probe_delta_c, atom_index=atom_index, depth_index=depth_index,
            detuning_index=detuning_index, flight_time=outcome.flight_time,
            max_excitation=outcome.max_excitation, steps=outcome.steps,
        )
    result = run_trapping_sequence(outcome.state, config, rng, outcome.noise, recorder)
    result = qualify_intervals(result, proto.qualification_threshold)
    return replace(result, atom_index=atom_index, depth_index=depth_index, detuning_index=detuning_index,
                   flight_time=outcome.flight_time,
                   max_excitation=max(result.max_excitation, outcome.max_excitation),
                   steps=result.steps + outcome.steps)
