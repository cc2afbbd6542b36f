"""程序入口文件 - 命令行子命令 oracle-check / calibrate / spectrum / lossrate / trajectory

退出码：0 成功，1 未预期异常，2 配置或用法错误，3 容差/验收失败，4 标定失败。
"""

import argparse
import logging
import os
import sys
import time
import traceback
from typing import Optional, Sequence

import numpy as np

from analysis import (FitFailureError, InsufficientSamplesError, axial_localization, coupling_distribution,
                      fit_normal_modes, heating_attribution, loss_rate_details, qualified_fraction,
                      split_by_depth, transmission_spectrum, write_attribution_csv, write_coupling_csv,
                      write_localization_csv, write_lossrate_csv, write_spectrum_csv)
from config_manager import ConfigError, SimulationConfig, load_config, save_config
from constants import DEFAULT_CONFIG_FILE, HBAR, AppConstants, get_output_path
from dynamics import NonBracketingError, calibrate_trap_noise
from log_manager import LogLevel, LogManager
from physics_core import ModelValidityError, max_steady_excitation
from protocol import AtomRunResult, run_atom
from reference_oracle import comparison_grid, convergence_error, write_comparison_csv
from result_store import ResultWriter, RunManifest, write_manifest
from sweep_manager import SweepAbortedError, SweepManager
from utils import angular_to_mhz, joule_to_mk

logger = logging.getLogger(__name__)

EXIT = AppConstants.EXIT_CODES
FILES = AppConstants.OUTPUT_FILES


def build_parser() -> argparse.ArgumentParser:
    """构造命令行解析器"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=DEFAULT_CONFIG_FILE, help='配置文件路径')
    common.add_argument('--out-dir', default='output', help='输出目录')
    common.add_argument('--seed', type=int, help='主随机种子')
    common.add_argument('--atoms', type=int, help='每个扫描点的原子数')
    common.add_argument('--detunings', type=float, nargs='+', metavar='MHZ', help='探测失谐列表（MHz）')
    common.add_argument('--depths', type=float, nargs='+', metavar='MK', help='保持阱深列表（mK）')
    common.add_argument('--workers', type=int, help='并行进程数')
    common.add_argument('--shot-noise', choices=('on', 'off'), help='触发计数的散粒噪声')
    common.add_argument('--log-level', default='INFO', help='日志级别')

    parser = argparse.ArgumentParser(prog='cavity-atom-sim', description='腔中单原子半经典蒙特卡罗模拟')
    sub = parser.add_subparsers(dest='command', required=True)

    oracle = sub.add_parser('oracle-check', parents=[common], help='弱驱动模型与精确稳态比较')
    oracle.add_argument('--eta-scale', type=float, default=1.0, help='驱动幅度放大倍数')

    calibrate = sub.add_parser('calibrate', parents=[common], help='标定阱深噪声与探测驱动幅度')
    calibrate.add_argument('--target-lifetime-ms', type=float, help='无探测光储存时间目标（ms）')

    sub.add_parser('spectrum', parents=[common], help='透射谱、耦合分布与轴向局域')
    sub.add_parser('lossrate', parents=[common], help='探测光引起的丢失率与加热归因')

    trajectory = sub.add_parser('trajectory', parents=[common], help='单原子轨迹输出')
    trajectory.add_argument('--atom-index', type=int, default=0, help='原子序号')
    return parser


def load_simulation_config(args: argparse.Namespace) -> SimulationConfig:
    """读取配置并应用命令行覆盖

    Raises:
        ConfigError: 配置或命令行取值无效
    """
    raw = load_config(args.config)
    config = SimulationConfig.from_raw(raw)
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides['seed'] = str(args.seed)
    if args.atoms is not None:
        overrides['atoms'] = str(args.atoms)
    if args.detunings:
        overrides['detunings_mhz'] = ', '.join(repr(v) for v in args.detunings)
    if args.depths:
        overrides['depths_mk'] = ', '.join(repr(v) for v in args.depths)
    if args.workers is not None:
        overrides['workers'] = str(args.workers)
    if args.shot_noise is not None:
        overrides['shot_noise'] = args.shot_noise
    if getattr(args, 'target_lifetime_ms', None) is not None:
        overrides['target_lifetime_ms'] = repr(args.target_lifetime_ms)
    return config.with_overrides(**overrides) if overrides else config


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

def cmd_oracle_check(config: SimulationConfig, out_dir: str, manifest: RunManifest,
                     eta_scale: float = 1.0) -> int:
    """弱驱动解析模型与精确稳态在 (g, Δc, Δa_eff) 网格上比较；任一误差超过容差时返回 3"""
    settings = config.oracle
    params = config.params
    eta = settings.eta(params) * eta_scale
    grid = settings.detuning_grid()
    rows = comparison_grid(params, eta, list(settings.couplings), grid, grid, settings.n_max)
    path = get_output_path(out_dir, FILES['oracle_check'])
    write_comparison_csv(path, rows)
    manifest.outputs.append(FILES['oracle_check'])

    tol = AppConstants.TOLERANCES
    worst_convergence = 0.0
    for g in settings.couplings:
        for delta in (grid[0], 0.0, grid[-1]):
            try:
                error = convergence_error(params, g, delta, delta, eta, settings.n_max, settings.n_max + 1)
            except ModelValidityError:
                continue
            worst_convergence = max(worst_convergence, error)
    if worst_convergence > tol['oracle_convergence']:
        logger.warning(f"光子数截断未收敛: n_max={settings.n_max} 与 {settings.n_max + 1} 相差 "
                       f"{worst_convergence:.3e}")

    worst = max(row.max_error for row in rows)
    manifest.notes['oracle_max_error'] = worst
    manifest.notes['oracle_convergence_error'] = worst_convergence
    if worst > tol['oracle_relative']:
        logger.error(f"弱驱动模型最大相对误差 {worst:.3e} 超过 {tol['oracle_relative']}")
        return EXIT['tolerance_failure']
    logger.info(f"精确稳态检查通过: 最大相对误差 {worst:.3e}")
    return EXIT['ok']


def _format_value(value: float) -> str:
    return f"{value:.6g}"


def cmd_calibrate(config: SimulationConfig, out_dir: str, manifest: RunManifest) -> int:
    """标定阱深噪声幅度（无探测光储存时间）并下调驱动幅度直到探测扫描的激发不超过上限

    输出 calibrated.cfg；取值未变化的键保留原文，重复标定不改变文件内容。
    """
    params = config.params
    raw = dict(config.raw)
    initial = config.noise.sigma_eps if config.noise.sigma_eps > 0 else None
    try:
        result = calibrate_trap_noise(config.target_lifetime, config.calibration, params, initial)
    except (NonBracketingError, ValueError) as e:
        logger.error(f"阱深噪声标定失败: {str(e)}")
        manifest.notes['calibration_error'] = str(e)
        return EXIT['calibration_failure']
    if result.sigma_eps != config.noise.sigma_eps:
        raw['sigma_eps'] = _format_value(result.sigma_eps)
    manifest.notes['sigma_eps'] = result.sigma_eps
    manifest.notes['storage_lifetime_s'] = result.lifetime
    manifest.notes['calibration_evaluations'] = [
        {'sigma_eps': m.sigma_eps, 'lifetime_s': m.lifetime, 'lost': m.n_lost, 'atoms': m.n_atoms}
        for m in result.evaluations
    ]

    cal = AppConstants.CALIBRATION_CONFIG
    eta = config.protocol.eta
    starks = [params.stark_per_depth * depth / HBAR for depth in config.sweep.depths]
    detunings = list(config.sweep.detunings)

    def worst_excitation(value: float) -> float:
        return max(max_steady_excitation(params, value, detunings, stark, cal['sweep_couplings'])
                   for stark in starks)

    worst = worst_excitation(eta)
    iterations = 0
    while worst > config.excitation_ceiling:
        iterations += 1
        if iterations > cal['eta_max_iterations']:
            logger.error(f"驱动幅度下调 {cal['eta_max_iterations']} 次后激发仍为 {worst:.4f}")
            return EXIT['calibration_failure']
        eta *= cal['eta_step']
        worst = worst_excitation(eta)
    if iterations:
        raw['eta_mhz'] = _format_value(angular_to_mhz(eta))
        logger.info(f"驱动幅度下调为 {angular_to_mhz(eta):.4g} MHz，最大稳态激发 {worst:.4f}")
    manifest.notes['eta_mhz'] = angular_to_mhz(eta)
    manifest.notes['max_steady_excitation'] = worst

    path = get_output_path(out_dir, FILES['calibrated_config'])
    if not save_config(path, raw):
        return EXIT['unexpected']
    manifest.config = raw
    manifest.outputs.append(FILES['calibrated_config'])
    logger.info(f"标定完成: sigma_eps={result.sigma_eps:.5g}, 寿命 {result.lifetime * 1e3:.2f} ms")
    return EXIT['ok']


def _run_sweep(config: SimulationConfig, out_dir: str, manifest: RunManifest) -> list[AtomRunResult]:
    """执行完整扫描并写出结果存档"""
    if config.noise.sigma_eps == 0:
        logger.warning("sigma_eps 为 0，配置可能尚未标定")
    sweep = config.sweep
    manager = SweepManager(config.experiment(), sweep.seed)
    manager.build_tasks(sweep.depths, sweep.detunings, sweep.atoms)
    with ResultWriter(get_output_path(out_dir, FILES['results'])) as writer:
        try:
            runs = manager.run(sweep.workers, writer)
        finally:
            manifest.failed_tasks = [list(key) for key in manager.failed_keys()]
            manifest.integration_steps = manager.total_steps()
    manifest.outputs.append(FILES['results'])

    max_exc = max((run.max_excitation for run in runs), default=0.0)
    manifest.notes['max_excitation'] = max_exc
    manifest.notes['triggered_atoms'] = sum(1 for run in runs if run.triggered)
    if max_exc > AppConstants.TOLERANCES['excitation_ceiling']:
        logger.warning(f"轨迹中最大原子激发 {max_exc:.4f} 超过 {AppConstants.TOLERANCES['excitation_ceiling']}")
    return runs


def _fit_summary(points: list, label: str) -> dict:
    """按阱深拟合简正模；失败时记录原因"""
    fits = {}
    for depth, group in split_by_depth(points).items():
        key = f"{label}@{joule_to_mk(depth):.4g}mK"
        try:
            fit = fit_normal_modes(group)
        except FitFailureError as e:
            logger.warning(f"{key} 简正模拟合失败: {str(e)}")
            fits[key] = {'error': str(e)}
            continue
        fits[key] = {
            'lower_center_mhz': angular_to_mhz(fit.lower.center),
            'upper_center_mhz': angular_to_mhz(fit.upper.center),
            'lower_fwhm_mhz': angular_to_mhz(fit.lower.fwhm),
            'upper_fwhm_mhz': angular_to_mhz(fit.upper.fwhm),
            'lower_height': fit.lower.height,
            'upper_height': fit.upper.height,
            'splitting_mhz': angular_to_mhz(fit.splitting),
            'residual': fit.residual,
        }
    return fits


def cmd_spectrum(config: SimulationConfig, out_dir: str, manifest: RunManifest) -> int:
    """完整流程系综：透射谱（全部/合格）、耦合分布与轴向局域"""
    runs = _run_sweep(config, out_dir, manifest)
    if not runs:
        logger.error("没有成功的原子流程")
        return EXIT['tolerance_failure']

    spectra = {'all': transmission_spectrum(runs, qualified_only=False),
               'qualified': transmission_spectrum(runs, qualified_only=True)}
    write_spectrum_csv(get_output_path(out_dir, FILES['spectrum']), spectra)

    bin_width = config.analysis.coupling_bin
    histograms = {'all': coupling_distribution(runs, False, bin_width),
                  'qualified': coupling_distribution(runs, True, bin_width)}
    write_coupling_csv(get_output_path(out_dir, FILES['coupling_hist']), histograms)

    localization = {}
    for selection, qualified in (('all', False), ('qualified', True)):
        try:
            localization[selection] = axial_localization(runs, qualified, config.params)
        except InsufficientSamplesError as e:
            logger.warning(f"轴向局域（{selection}）: {str(e)}")
            localization[selection] = None
    write_localization_csv(get_output_path(out_dir, FILES['localization']), localization)
    manifest.outputs.extend([FILES['spectrum'], FILES['coupling_hist'], FILES['localization']])

    for selection, points in spectra.items():
        manifest.fits.update(_fit_summary(points, selection))
    try:
        manifest.notes['qualified_fraction'] = qualified_fraction(runs)
    except InsufficientSamplesError as e:
        logger.warning(str(e))
    for selection, hist in histograms.items():
        if hist.n_intervals:
            manifest.notes[f'mean_coupling_mhz_{selection}'] = angular_to_mhz(hist.mean)
    return EXIT['ok']


def cmd_lossrate(config: SimulationConfig, out_dir: str, manifest: RunManifest) -> int:
    """完整流程系综：探测光引起的丢失率谱与加热归因（不做区间鉴定）"""
    runs = _run_sweep(config, out_dir, manifest)
    if not runs:
        logger.error("没有成功的原子流程")
        return EXIT['tolerance_failure']
    details = loss_rate_details(runs)
    write_lossrate_csv(get_output_path(out_dir, FILES['lossrate']), details)
    write_attribution_csv(get_output_path(out_dir, FILES['attribution']), heating_attribution(runs))
    manifest.outputs.extend([FILES['lossrate'], FILES['attribution']])
    manifest.notes['loss_rate_estimator'] = AppConstants.ANALYSIS_CONFIG['baseline_subtraction']
    manifest.fits.update(_fit_summary([d.point for d in details], 'lossrate'))
    return EXIT['ok']


def cmd_trajectory(config: SimulationConfig, out_dir: str, manifest: RunManifest, atom_index: int = 0) -> int:
    """单原子完整流程，按 record_stride 输出相空间轨迹与场观测量"""
    sweep = config.sweep
    experiment = config.experiment().for_point(sweep.detunings[0], sweep.depths[0])
    samples: list[tuple[float, ...]] = []

    def record(*values: float) -> None:
        samples.append(values)

    result = run_atom(experiment, sweep.seed, atom_index, 0, 0, recorder=record)
    path = get_output_path(out_dir, FILES['trajectory'])
    header = 't_s r_x_m r_y_m r_z_m p_x p_y p_z n_photon excitation g_rad_s'
    data = np.asarray(samples, dtype=float).reshape(-1, 10)
    np.savetxt(path, data, header=header, fmt='%.10e')
    manifest.outputs.append(FILES['trajectory'])
    manifest.integration_steps = result.steps
    manifest.notes['triggered'] = result.triggered
    manifest.notes['exit_time_s'] = result.exit_time
    manifest.notes['loss_time_s'] = result.loss_time
    logger.info(f"轨迹输出 {data.shape[0]} 个采样点: {path}")
    return EXIT['ok']


# ---------------------------------------------------------------------------
# 入口
# ---------------------------------------------------------------------------

def _write_startup_error(out_dir: str) -> None:
    try:
        error_log = get_output_path(out_dir, FILES['startup_error'])
        with open(error_log, 'w', encoding='utf-8') as f:
            f.write('程序运行失败:\n')
            traceback.print_exc(file=f)
    except (IOError, OSError):
        traceback.print_exc()


def run(args: argparse.Namespace) -> int:
    """执行一个子命令并写出运行清单"""
    out_dir = os.path.abspath(args.out_dir)
    log_manager = LogManager()
    try:
        level = LogLevel.from_name(args.log_level)
    except ValueError as e:
        print(str(e), file=sys.stderr)
        return EXIT['config_error']
    log_manager.setup(out_dir, level)
    start = time.time()
    try:
        try:
            config = load_simulation_config(args)
        except ConfigError as e:
            logger.error(f"配置错误: {str(e)}")
            return EXIT['config_error']

        manifest = RunManifest(command=' '.join(getattr(args, 'argv', [args.command])),
                               config=dict(config.raw), master_seed=config.sweep.seed)
        try:
            try:
                config.integrator.check_stability(config.params)
            except ValueError as e:
                raise ConfigError(str(e), field_name='dt_ns') from e
            if args.command == 'oracle-check':
                code = cmd_oracle_check(config, out_dir, manifest, args.eta_scale)
            elif args.command == 'calibrate':
                code = cmd_calibrate(config, out_dir, manifest)
            elif args.command == 'spectrum':
                code = cmd_spectrum(config, out_dir, manifest)
            elif args.command == 'lossrate':
                code = cmd_lossrate(config, out_dir, manifest)
            else:
                code = cmd_trajectory(config, out_dir, manifest, args.atom_index)
        except SweepAbortedError as e:
            logger.error(str(e))
            code = EXIT['tolerance_failure']
        except ConfigError as e:
            logger.error(f"配置错误: {str(e)}")
            code = EXIT['config_error']

        manifest.exit_code = code
        manifest.wall_clock_s = time.time() - start
        manifest.log_stats = log_manager.get_stats()
        manifest.warnings = [entry.to_formatted_string()
                             for entry in log_manager.get_logs(level=LogLevel.WARNING)]
        write_manifest(get_output_path(out_dir, FILES['manifest']), manifest)
        return code
    finally:
        log_manager.shutdown()


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数"""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return run(args)
    except Exception:
        _write_startup_error(args.out_dir)
        return EXIT['unexpected']


if __name__ == "__main__":
    sys.exit(main())
