"""常量定义文件 - 物理常量、默认参数、输出文件与退出码"""
import os
from math import pi

from scipy import constants as sc

# 物理常量（SI）
HBAR = sc.hbar
KB = sc.k
AMU = sc.atomic_mass
TWO_PI = 2.0 * pi

# 85Rb 原子质量（原子质量单位）
RB85_MASS_AMU = 84.9117897


class AppConstants:
    """应用程序常量类"""
    VERSION = "1.0.0"

    # 原子结果记录的格式版本
    SCHEMA_VERSION = 1

    # 退出码
    EXIT_CODES = {
        'ok': 0,
        'unexpected': 1,               # 未捕获异常
        'config_error': 2,             # 配置或命令行错误
        'tolerance_failure': 3,        # 容差/验收失败
        'calibration_failure': 4,      # 标定失败
    }

    # 输出文件名
    OUTPUT_FILES = {
        'spectrum': 'spectrum.csv',
        'lossrate': 'lossrate.csv',
        'coupling_hist': 'coupling_hist.csv',
        'localization': 'localization.csv',
        'attribution': 'attribution.csv',
        'oracle_check': 'oracle_check.csv',
        'results': 'results.jsonl',
        'manifest': 'manifest.json',
        'trajectory': 'trajectory.txt',
        'calibrated_config': 'calibrated.cfg',
        'run_log': 'run.log',
        'startup_error': 'startup_error.log',
    }

    # 数值容差
    TOLERANCES = {
        'oracle_relative': 1e-3,       # 弱驱动模型与精确稳态的相对误差上限
        'oracle_convergence': 1e-4,    # 光子数截断收敛判据
        'absolute_floor': 1e-12,       # 相对误差分母下限（处理零值）
        'hermiticity': 1e-10,
        'trace': 1e-10,
        'positivity': 1e-8,
        'null_space_ratio': 1e-12,     # 第二小奇异值 / 最大奇异值 下限
        'model_validity': 0.5,         # |sigma|^2 模型有效上限
        'excitation_hard_fail': 0.05,  # 积分过程中 |sigma|^2 硬上限
        'excitation_ceiling': 0.014,   # 标定后探测扫描的激发上限
        'stability_guard': 0.5,        # dt * max(g0, kappa, gamma) 上限
        'lifetime_relative': 0.10,     # 寿命标定相对容差
    }

    # 标定配置
    CALIBRATION_CONFIG = {
        'sigma_low': 0.0,
        'sigma_floor': 1e-4,           # 对数二分的下端
        'sigma_high': 0.5,
        'max_iterations': 30,
        'eta_step': 0.9,               # 每次下调驱动幅度的比例
        'eta_max_iterations': 60,
        'sweep_couplings': 33,         # 激发扫描的耦合取样点数
    }

    # 分析配置
    ANALYSIS_CONFIG = {
        'localization_bins': 100,      # 轴向折叠直方图的分箱数
        'min_localization_samples': 1000,
        'min_fit_points': 8,
        'fit_residual_limit': 0.05,    # 双洛伦兹拟合允许的 RMS 残差（相对峰高）
        'baseline_subtraction': 'cooling_hazard',
    }

    # 扫描配置
    SWEEP_CONFIG = {
        'failure_fraction_limit': 0.01,
        'results_flush_every': 50,     # 结果存档每累计多少条刷新一次
        'chunk_size': 1,
    }

    # 日志配置
    LOG_CONFIG = {
        'buffer_size': 1000,
        'console_format': '[%(asctime)s] [%(levelname)s] %(name)s: %(message)s',
        'file_format': '%(asctime)s %(levelname)s %(name)s %(process)d: %(message)s',
        'date_format': '%H:%M:%S',
    }

    # CSV 列定义（单位写在列名中）
    CSV_COLUMNS = {
        'spectrum': ['delta_c_mhz', 'trap_depth_mk', 'trap_power_nw', 'selection',
                     'mean_transmission', 'std_error', 'n_intervals', 'n_atoms'],
        'lossrate': ['delta_c_mhz', 'trap_depth_mk', 'trap_power_nw', 'loss_rate_per_s',
                     'std_error_per_s', 'n_intervals', 'n_atoms', 'probe_losses',
                     'probe_exposure_s', 'cooling_losses', 'cooling_exposure_s'],
        'coupling_hist': ['selection', 'bin_left_mhz', 'bin_right_mhz', 'density_per_mhz'],
        'localization': ['selection', 'fwhm_m', 'fwhm_over_lambda', 'n_samples'],
        'attribution': ['delta_c_mhz', 'trap_depth_mk', 'spont_recoil_share', 'dipole_fluct_share',
                        'probe_force_share', 'spont_recoil_j', 'dipole_fluct_j', 'probe_force_j',
                        'trap_noise_j'],
        'oracle_check': ['g_mhz', 'delta_c_mhz', 'delta_a_eff_mhz', 'n_empty',
                         'analytic_photon_number', 'oracle_photon_number',
                         'analytic_excitation', 'oracle_excitation',
                         'err_mean_a', 'err_mean_sigma', 'err_photon_number',
                         'err_excitation', 'err_interaction', 'max_error'],
    }

    # 光阱功率显示换算：kB * 1.6 mK <-> 280 nW
    TRAP_POWER_REFERENCE = {
        'depth_mk': 1.6,
        'power_nw': 280.0,
    }


def get_base_dir() -> str:
    """获取程序基础目录

    Returns:
        str: 程序所在目录的绝对路径
    """
    return os.path.dirname(os.path.abspath(__file__))


# 默认配置文件路径
DEFAULT_CONFIG_FILE = os.path.join(get_base_dir(), 'default_config.cfg')


def get_output_path(out_dir: str, filename: str) -> str:
    """获取输出文件路径，必要时创建输出目录

    Args:
        out_dir: 输出目录
        filename: 文件名

    Returns:
        str: 输出文件的绝对路径
    """
    out_dir = os.path.abspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, filename)
