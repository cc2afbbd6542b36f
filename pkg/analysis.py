"""分析模块 - 把原子流程结果汇总为透射谱、丢失率谱、耦合分布、轴向局域与加热归因

所有函数都是作用于不可变结果集合的纯函数。分组按 (trap_depth_hold, delta_c) 排序输出，
组内数值先排序再求和，因此输出与结果顺序无关，重新读取存档后的分析与进程内分析逐位一致。
"""
# pyright: reportAny=false

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from lmfit import Minimizer, Parameters
from lmfit.lineshapes import lorentzian
from scipy.signal import find_peaks, peak_widths

from constants import HBAR, AppConstants
from dynamics import HeatingBudget
from physics_core import PhysicalParams, effective_atom_detuning, trap_power_nw, weak_drive_steady_state
from protocol import AtomRunResult, IntervalRecord
from utils import angular_to_mhz, joule_to_mk, mhz_to_angular

logger = logging.getLogger(__name__)


class FitFailureError(Exception):
    """双洛伦兹拟合失败（峰合并或残差过大）"""


class InsufficientSamplesError(Exception):
    """样本数不足以给出统计量"""


@dataclass(frozen=True)
class SpectrumPoint:
    """谱上的一个点"""
    delta_c: float
    trap_depth_hold: float
    mean_value: float
    std_error: float
    n_intervals: int
    n_atoms: int

    @property
    def trap_power_nw(self) -> float:
        return trap_power_nw(self.trap_depth_hold)


@dataclass(frozen=True)
class NormalModePeak:
    """单个简正模峰：中心、半高全宽（rad/s）与峰高（背景之上）"""
    center: float
    fwhm: float
    height: float


@dataclass(frozen=True)
class PeakFitResult:
    """双洛伦兹拟合结果"""
    lower: NormalModePeak
    upper: NormalModePeak
    background: float
    residual: float

    @property
    def splitting(self) -> float:
        return self.upper.center - self.lower.center


@dataclass(frozen=True)
class CouplingHistogram:
    """探测区间平均耦合 |g| 的归一化直方图（rad/s）"""
    edges: np.ndarray
    density: np.ndarray
    mean: float
    n_intervals: int

    def total_area(self) -> float:
        return float(np.sum(self.density * np.diff(self.edges)))

    def mass_below(self, g: float) -> float:
        """|g| < g 的概率（分箱内按均匀分布插值）"""
        widths = np.diff(self.edges)
        left = self.edges[:-1]
        covered = np.clip((g - left) / widths, 0.0, 1.0)
        return float(np.sum(self.density * widths * covered))


@dataclass(frozen=True)
class LocalizationResult:
    """折叠到最近光阱波腹的腔轴位置分布"""
    fwhm: float
    edges: np.ndarray
    density: np.ndarray
    n_samples: int
    lambda_probe: float

    @property
    def lambda_over_fwhm(self) -> float:
        """以 λ/N 表示宽度时的 N"""
        return self.lambda_probe / self.fwhm


@dataclass(frozen=True)
class AttributionRow:
    """一个 (阱深, 失谐) 组的探测加热归因；总量为零时份额为 None"""
    delta_c: float
    trap_depth_hold: float
    spont_share: Optional[float]
    dipole_share: Optional[float]
    force_share: Optional[float]
    budget: HeatingBudget
    n_intervals: int

    @property
    def defined(self) -> bool:
        return self.spont_share is not None


# ---------------------------------------------------------------------------
# 分组
# ---------------------------------------------------------------------------

def _group_runs(runs: Iterable[AtomRunResult]) -> dict[tuple[float, float], list[AtomRunResult]]:
    """按 (trap_depth_hold, delta_c) 分组，组内按任务键排序"""
    groups: dict[tuple[float, float], list[AtomRunResult]] = defaultdict(list)
    for run in runs:
        groups[(run.trap_depth_hold, run.delta_c)].append(run)
    return {key: sorted(groups[key], key=lambda r: r.key) for key in sorted(groups)}


def _probe_intervals(run: AtomRunResult, qualified_only: bool) -> list[IntervalRecord]:
    """原子在场到区间结束的探测区间"""
    return [iv for iv in run.probe_intervals
            if iv.atom_present and iv.present_duration > 0 and (iv.qualified or not qualified_only)]


def _mean_and_error(values: list[float]) -> tuple[float, float]:
    """均值与均值标准误差（单个样本时误差记为 0）"""
    data = np.sort(np.asarray(values, dtype=float))
    mean = math.fsum(data) / data.size
    if data.size < 2:
        return mean, 0.0
    return mean, float(np.std(data, ddof=1) / math.sqrt(data.size))


# ---------------------------------------------------------------------------
# 谱
# ---------------------------------------------------------------------------

def transmission_spectrum(runs: Sequence[AtomRunResult], qualified_only: bool,
                          relative: bool = False) -> list[SpectrumPoint]:
    """探测区间平均透射随 (阱深, 探测失谐) 的分布

    默认使用共振归一透射（总在 [0,1] 内）；relative=True 时改用同失谐空腔归一的相对透射。
    没有可用区间的组不输出。

    Raises:
        ValueError: runs 为空
    """
    if not runs:
        raise ValueError("没有可分析的原子结果")
    points = []
    for (depth, delta_c), group in _group_runs(runs).items():
        values = []
        n_atoms = 0
        for run in group:
            intervals = _probe_intervals(run, qualified_only)
            if intervals:
                n_atoms += 1
            values.extend(iv.mean_transmission_rel if relative else iv.mean_transmission
                          for iv in intervals)
        if not values:
            continue
        mean, error = _mean_and_error(values)
        points.append(SpectrumPoint(delta_c, depth, mean, error, len(values), n_atoms))
    logger.info(f"透射谱: {len(points)} 个点 (qualified_only={qualified_only})")
    return points


@dataclass(frozen=True)
class LossRatePoint:
    """丢失率谱上的一个点及其计数明细"""
    point: SpectrumPoint
    probe_losses: int
    probe_exposure: float
    cooling_losses: int
    cooling_exposure: float


def loss_rate_details(runs: Sequence[AtomRunResult]) -> list[LossRatePoint]:
    """探测光引起的丢失率：rate = n_p/T_p - n_c/T_c

    n_p、n_c 为探测区间与冷却区间内丢失的原子数，T_p、T_c 为原子在场时的累计暴露时间。
    冷却区间的丢失率作为基线（光阱噪声与冷却光本身造成的丢失），差值为负时截断为 0。
    泊松近似下误差为 sqrt(n_p/T_p² + n_c/T_c²)。不做区间鉴定。
    """
    if not runs:
        raise ValueError("没有可分析的原子结果")
    rows = []
    for (depth, delta_c), group in _group_runs(runs).items():
        triggered = [run for run in group if run.triggered]
        probe_losses = sum(1 for run in triggered if run.loss_time is not None and run.loss_during_probe)
        cooling_losses = sum(1 for run in triggered if run.loss_time is not None and not run.loss_during_probe)
        probe_times = [iv.present_duration for run in triggered for iv in run.probe_intervals]
        cooling_times = [iv.present_duration for run in triggered for iv in run.cooling_intervals]
        probe_exposure = math.fsum(sorted(probe_times))
        cooling_exposure = math.fsum(sorted(cooling_times))
        if probe_exposure <= 0.0:
            continue
        rate = probe_losses / probe_exposure
        variance = probe_losses / probe_exposure ** 2
        if cooling_exposure > 0.0:
            rate -= cooling_losses / cooling_exposure
            variance += cooling_losses / cooling_exposure ** 2
        # 探测引起的丢失率非负，基线超过探测丢失时记为 0
        rate = max(0.0, rate)
        point = SpectrumPoint(delta_c, depth, rate, math.sqrt(variance), len(probe_times), len(triggered))
        rows.append(LossRatePoint(point, probe_losses, probe_exposure, cooling_losses, cooling_exposure))
    return rows


def loss_rate_spectrum(runs: Sequence[AtomRunResult]) -> list[SpectrumPoint]:
    """探测光引起的丢失率谱（1/s）"""
    return [row.point for row in loss_rate_details(runs)]


def coupling_distribution(runs: Sequence[AtomRunResult], qualified_only: bool,
                          bin_width: float = mhz_to_angular(0.5)) -> CouplingHistogram:
    """探测区间平均耦合 |g| 的直方图，面积归一为 1；没有区间时返回空直方图"""
    if bin_width <= 0:
        raise ValueError(f"分箱宽度必须为正: {bin_width}")
    values = np.sort(np.asarray([iv.mean_coupling for run in runs
                                 for iv in _probe_intervals(run, qualified_only)], dtype=float))
    if values.size == 0:
        return CouplingHistogram(np.zeros(1), np.zeros(0), float('nan'), 0)
    n_bins = max(1, int(math.ceil(values[-1] / bin_width)))
    if values[-1] >= n_bins * bin_width:
        n_bins += 1
    edges = np.arange(n_bins + 1) * bin_width
    counts, edges = np.histogram(values, bins=edges)
    density = counts / (values.size * bin_width)
    return CouplingHistogram(edges, density, math.fsum(values) / values.size, int(values.size))


# ---------------------------------------------------------------------------
# 轴向局域
# ---------------------------------------------------------------------------

def _half_max_width(centers: np.ndarray, density: np.ndarray) -> float:
    """峰值一半处的全宽，两侧在相邻分箱中心之间线性插值"""
    peak = int(np.argmax(density))
    half = 0.5 * density[peak]
    step = centers[1] - centers[0] if centers.size > 1 else 1.0

    left = centers[0] - 0.5 * step
    for i in range(peak, 0, -1):
        if density[i - 1] < half:
            frac = (density[i] - half) / (density[i] - density[i - 1])
            left = centers[i] - frac * step
            break
    right = centers[-1] + 0.5 * step
    for i in range(peak, density.size - 1):
        if density[i + 1] < half:
            frac = (density[i] - half) / (density[i] - density[i + 1])
            right = centers[i] + frac * step
            break
    return float(right - left)


def axial_localization(runs: Sequence[AtomRunResult], qualified_only: bool,
                       params: PhysicalParams) -> LocalizationResult:
    """探测区间内腔轴位置（折叠到 [-λt/4, λt/4)）分布的半高全宽

    Raises:
        InsufficientSamplesError: 样本少于 min_localization_samples
    """
    histograms = [iv.axial_histogram for run in runs for iv in _probe_intervals(run, qualified_only)
                  if iv.axial_histogram]
    n_bins = AppConstants.ANALYSIS_CONFIG['localization_bins']
    total = np.zeros(n_bins, dtype=np.int64)
    for hist in histograms:
        if len(hist) != n_bins:
            raise ValueError(f"轴向直方图分箱数不一致: {len(hist)} != {n_bins}")
        total += np.asarray(hist, dtype=np.int64)
    n_samples = int(total.sum())
    minimum = AppConstants.ANALYSIS_CONFIG['min_localization_samples']
    if n_samples < minimum:
        raise InsufficientSamplesError(f"轴向位置样本 {n_samples} 少于 {minimum}")

    quarter = 0.25 * params.lambda_trap
    edges = np.linspace(-quarter, quarter, n_bins + 1)
    width = edges[1] - edges[0]
    density = total / (n_samples * width)
    centers = 0.5 * (edges[:-1] + edges[1:])
    fwhm = _half_max_width(centers, density)
    return LocalizationResult(fwhm, edges, density, n_samples, params.lambda_probe)


# ---------------------------------------------------------------------------
# 加热归因
# ---------------------------------------------------------------------------

def heating_attribution(runs: Sequence[AtomRunResult]) -> list[AttributionRow]:
    """每个 (阱深, 失谐) 组内，只统计探测区间的加热能量，给出各探测加热通道的份额

    通道为自发辐射反冲、偶极力涨落与平均探测力做的正功。探测光关闭的区间里只剩冷却区间
    留下的腔场衰减，不计入份额；组内没有探测光打开的区间或三者之和不为正时份额为 None。
    budget 仍累计组内全部探测区间。
    """
    rows = []
    for (depth, delta_c), group in _group_runs(runs).items():
        intervals = [iv for run in group for iv in run.probe_intervals]
        if not intervals:
            continue
        budget = HeatingBudget()
        driven = HeatingBudget()
        for iv in intervals:
            budget = budget.plus(iv.heating)
            if iv.drive_enabled:
                driven = driven.plus(iv.heating)
        channels = driven.probe_induced()
        total = math.fsum(channels.values())
        if total > 0.0:
            shares = [channels['spont_recoil'] / total, channels['dipole_fluct'] / total,
                      channels['probe_force'] / total]
        else:
            shares = [None, None, None]
        rows.append(AttributionRow(delta_c, depth, *shares, budget=budget, n_intervals=len(intervals)))
    return rows


def qualified_fraction(runs: Sequence[AtomRunResult]) -> float:
    """原子在场的探测区间中合格区间的比例

    Raises:
        InsufficientSamplesError: 没有原子在场的探测区间
    """
    present = [iv for run in runs for iv in _probe_intervals(run, qualified_only=False)]
    if not present:
        raise InsufficientSamplesError("没有原子在场的探测区间")
    return sum(1 for iv in present if iv.qualified) / len(present)


# ---------------------------------------------------------------------------
# 静止原子谱与简正模拟合
# ---------------------------------------------------------------------------

def pinned_atom_spectrum(params: PhysicalParams, stark_shift: float, delta_cs: Sequence[float],
                         g: Optional[float] = None) -> list[SpectrumPoint]:
    """静止在波腹的原子的解析透射谱（共振归一）

    Args:
        params: 物理参数
        stark_shift: 原子处的 Stark 频移（rad/s）
        delta_cs: 探测-腔失谐（rad/s）
        g: 耦合，默认 g0
    """
    g = params.g0 if g is None else g
    eta = 0.01 * params.kappa
    depth = stark_shift / params.stark_per_depth * HBAR
    points = []
    for delta_c in delta_cs:
        delta_a = effective_atom_detuning(delta_c, stark_shift, params)
        value = weak_drive_steady_state(g, delta_c, delta_a, eta, params).transmission
        points.append(SpectrumPoint(delta_c, depth, value, 0.0, 1, 1))
    return points


def _double_lorentzian(pars: Parameters, x: np.ndarray) -> np.ndarray:
    return (pars['background']
            + lorentzian(x, pars['amp_lo'], pars['cen_lo'], pars['wid_lo'])
            + lorentzian(x, pars['amp_hi'], pars['cen_hi'], pars['wid_hi']))


def _residual(pars: Parameters, x: np.ndarray, data: np.ndarray) -> np.ndarray:
    return _double_lorentzian(pars, x) - data


def fit_double_lorentzian(delta_cs: Sequence[float], values: Sequence[float]) -> PeakFitResult:
    """平坦背景上的双洛伦兹最小二乘拟合

    在 MHz 坐标下拟合；初值取两个最高的局部极大值及其半高宽。

    Raises:
        FitFailureError: 点数不足、找不到两个峰、峰合并或 RMS 残差超过峰高的给定比例
    """
    cfg = AppConstants.ANALYSIS_CONFIG
    order = np.argsort(np.asarray(delta_cs, dtype=float))
    x = np.array([angular_to_mhz(v) for v in np.asarray(delta_cs, dtype=float)[order]])
    y = np.asarray(values, dtype=float)[order]
    if x.size < cfg['min_fit_points']:
        raise FitFailureError(f"拟合点数 {x.size} 少于 {cfg['min_fit_points']}")
    if not np.all(np.isfinite(y)):
        raise FitFailureError("谱中含非有限值")

    peaks, props = find_peaks(y, height=y.min())
    if peaks.size < 2:
        raise FitFailureError(f"只找到 {peaks.size} 个峰，简正模无法分辨")
    best = np.sort(peaks[np.argsort(props['peak_heights'])[-2:]])
    widths = peak_widths(y, best, rel_height=0.5)
    index = np.arange(x.size)
    left_x = np.interp(widths[2], index, x)
    right_x = np.interp(widths[3], index, x)
    background = float(y.min())
    spacing = float(np.min(np.diff(x)))

    pars = Parameters()
    pars.add(name='background', value=background)
    for label, peak, lx, rx in zip(('lo', 'hi'), best, left_x, right_x):
        hwhm = max(0.5 * (rx - lx), 0.5 * spacing)
        height = y[peak] - background
        pars.add(name=f'wid_{label}', value=hwhm, min=1e-6)
        pars.add(name=f'amp_{label}', value=height * math.pi * hwhm, min=0)
    pars.add(name='cen_lo', value=x[best[0]])
    pars.add(name='peak_split', value=x[best[1]] - x[best[0]], min=1e-6)
    pars.add(name='cen_hi', expr='peak_split+cen_lo')

    mini = Minimizer(_residual, pars, fcn_args=(x, y))
    out = mini.leastsq()
    fitted = out.params

    peaks_out = []
    for label in ('lo', 'hi'):
        width = float(fitted[f'wid_{label}'].value)
        amplitude = float(fitted[f'amp_{label}'].value)
        center = float(fitted[f'cen_{label}'].value)
        peaks_out.append(NormalModePeak(mhz_to_angular(center), mhz_to_angular(2.0 * width),
                                        amplitude / (math.pi * width)))
    lower, upper = peaks_out

    scale = max(lower.height, upper.height)
    rms = float(np.sqrt(np.mean(out.residual ** 2))) / scale if scale > 0 else float('inf')
    if rms > cfg['fit_residual_limit']:
        raise FitFailureError(f"拟合残差 {rms:.3g} 超过 {cfg['fit_residual_limit']}")
    split = upper.center - lower.center
    if split < 0.5 * max(lower.fwhm, upper.fwhm):
        raise FitFailureError(f"两峰合并: 间距 {angular_to_mhz(split):.3f} MHz")
    result = PeakFitResult(lower, upper, float(fitted['background'].value), rms)
    logger.info(f"简正模拟合: {angular_to_mhz(lower.center):.3f} / {angular_to_mhz(upper.center):.3f} MHz, "
                f"FWHM {angular_to_mhz(lower.fwhm):.3f} / {angular_to_mhz(upper.fwhm):.3f} MHz")
    return result


def fit_normal_modes(spectrum: Sequence[SpectrumPoint]) -> PeakFitResult:
    """对单一阱深的谱点做双洛伦兹拟合

    Raises:
        FitFailureError: 见 fit_double_lorentzian；谱点来自多个阱深时也会抛出
    """
    depths = {point.trap_depth_hold for point in spectrum}
    if len(depths) > 1:
        raise FitFailureError("谱点来自多个阱深，请按阱深分别拟合")
    return fit_double_lorentzian([p.delta_c for p in spectrum], [p.mean_value for p in spectrum])


def split_by_depth(points: Sequence[SpectrumPoint]) -> dict[float, list[SpectrumPoint]]:
    """按阱深拆分谱点，组内按失谐排序"""
    groups: dict[float, list[SpectrumPoint]] = defaultdict(list)
    for point in points:
        groups[point.trap_depth_hold].append(point)
    return {depth: sorted(groups[depth], key=lambda p: p.delta_c) for depth in sorted(groups)}


# ---------------------------------------------------------------------------
# CSV 输出
# ---------------------------------------------------------------------------

def _format(value: Optional[float]) -> str:
    if value is None:
        return 'undefined'
    return repr(float(value))


def _write_rows(path: str, columns: list[str], rows: Iterable[list]) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(row)
    logger.info(f"已写出 {path}")


def write_spectrum_csv(path: str, spectra: dict[str, Sequence[SpectrumPoint]]) -> None:
    """写 spectrum.csv；spectra 的键为选择方式（'all' / 'qualified'）"""
    rows = []
    for selection, points in spectra.items():
        for p in points:
            rows.append([_format(angular_to_mhz(p.delta_c)), _format(joule_to_mk(p.trap_depth_hold)),
                         _format(p.trap_power_nw), selection, _format(p.mean_value),
                         _format(p.std_error), p.n_intervals, p.n_atoms])
    _write_rows(path, AppConstants.CSV_COLUMNS['spectrum'], rows)


def write_lossrate_csv(path: str, details: Sequence[LossRatePoint]) -> None:
    rows = []
    for d in details:
        p = d.point
        rows.append([_format(angular_to_mhz(p.delta_c)), _format(joule_to_mk(p.trap_depth_hold)),
                     _format(p.trap_power_nw), _format(p.mean_value), _format(p.std_error),
                     p.n_intervals, p.n_atoms, d.probe_losses, _format(d.probe_exposure),
                     d.cooling_losses, _format(d.cooling_exposure)])
    _write_rows(path, AppConstants.CSV_COLUMNS['lossrate'], rows)


def write_coupling_csv(path: str, histograms: dict[str, CouplingHistogram]) -> None:
    """写 coupling_hist.csv，密度单位 1/MHz"""
    rows = []
    for selection, hist in histograms.items():
        to_mhz = angular_to_mhz(1.0)
        for left, right, density in zip(hist.edges[:-1], hist.edges[1:], hist.density):
            rows.append([selection, _format(angular_to_mhz(left)), _format(angular_to_mhz(right)),
                         _format(density / to_mhz)])
    _write_rows(path, AppConstants.CSV_COLUMNS['coupling_hist'], rows)


def write_localization_csv(path: str, results: dict[str, Optional[LocalizationResult]]) -> None:
    """写 localization.csv；样本不足的选择方式记为 undefined"""
    rows = []
    for selection, result in results.items():
        if result is None:
            rows.append([selection, 'undefined', 'undefined', 0])
        else:
            rows.append([selection, _format(result.fwhm), _format(result.fwhm / result.lambda_probe),
                         result.n_samples])
    _write_rows(path, AppConstants.CSV_COLUMNS['localization'], rows)


def write_attribution_csv(path: str, rows_in: Sequence[AttributionRow]) -> None:
    rows = []
    for r in rows_in:
        channels = r.budget.probe_induced()
        rows.append([_format(angular_to_mhz(r.delta_c)), _format(joule_to_mk(r.trap_depth_hold)),
                     _format(r.spont_share), _format(r.dipole_share), _format(r.force_share),
                     _format(channels['spont_recoil']), _format(channels['dipole_fluct']),
                     _format(channels['probe_force']), _format(r.budget.trap_noise)])
    _write_rows(path, AppConstants.CSV_COLUMNS['attribution'], rows)
