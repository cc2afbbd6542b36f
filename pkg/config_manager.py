"""配置管理文件 - 带单位后缀的 key = value 配置文本（支持原子写和备份）

配置文件每行一个 `key = value`，`#` 之后为注释。键名带单位后缀（_mhz、_mk、_us、_ns ...），
频率在构造 SimulationConfig 时乘 2π 且只乘一次。未知键、格式错误的行与非法取值都会抛出
ConfigError，并给出行号与字段名。
"""
import logging
import math
import os
import shutil
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from constants import AMU, DEFAULT_CONFIG_FILE, HBAR
from dynamics import CalibrationFixture, IntegratorConfig, TrapNoiseProcess
from physics_core import PhysicalParams
from protocol import ExperimentConfig, ProtocolConfig, TriggerConfig
from utils import mhz_to_angular, mk_to_joule, ns_to_s, us_to_s

logger = logging.getLogger(__name__)

# 线程锁，保护配置写入
_config_lock = threading.Lock()


class ConfigError(Exception):
    """配置解析错误，带行号与字段名"""

    def __init__(self, message: str, line: Optional[int] = None, field_name: Optional[str] = None) -> None:
        self.line = line
        self.field_name = field_name
        location = []
        if line is not None:
            location.append(f"第 {line} 行")
        if field_name is not None:
            location.append(f"字段 {field_name}")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(f"{prefix}{message}")


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ('on', 'true', 'yes', '1'):
        return True
    if value in ('off', 'false', 'no', '0'):
        return False
    raise ValueError(f"无法解析为开关: {text!r}")


def _parse_float_list(text: str) -> list[float]:
    items = [item.strip() for item in text.split(',') if item.strip()]
    if not items:
        raise ValueError("列表为空")
    return [float(item) for item in items]


def _parse_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"不是有限数: {text!r}")
    return value


# 配置键定义：键 -> (解析函数, 默认值文本, 说明)，顺序即输出顺序
CONFIG_SCHEMA: dict[str, tuple[Callable[[str], Any], str, str]] = {
    # 物理参数
    'g0_mhz': (_parse_float, '16.0', '峰值原子-腔耦合 g0/2π'),
    'gamma_mhz': (_parse_float, '3.0', '原子偶极衰减率 γ/2π'),
    'kappa_mhz': (_parse_float, '1.4', '腔场衰减率 κ/2π'),
    'lambda_probe_nm': (_parse_float, '780.2', '探测光波长'),
    'lambda_trap_nm': (_parse_float, '785.3', '光阱波长'),
    'waist_um': (_parse_float, '29.0', '模式腰斑半径'),
    'cavity_length_um': (_parse_float, '122.0', '腔长'),
    'finesse': (_parse_float, '440000', '腔精细度'),
    'atom_mass_amu': (_parse_float, '84.9117897', '原子质量'),
    'delta_a0_mhz': (_parse_float, '35.0', '腔-原子失谐 (ωc-ωa)/2π'),
    'stark_reference_mhz': (_parse_float, '35.0', '参考阱深下波腹处的 Stark 频移/2π'),
    'stark_reference_depth_mk': (_parse_float, '1.6', 'Stark 频移参考阱深'),
    'gravity_m_s2': (_parse_float, '9.81', '重力加速度，0 表示关闭'),
    # 流程
    'cooling_us': (_parse_float, '500', '冷却区间时长'),
    'probe_us': (_parse_float, '100', '探测区间时长'),
    'probe_delta_c_mhz': (_parse_float, '0.0', '探测-腔失谐 Δc/2π（谱扫描时被覆盖）'),
    'trap_depth_guide_mk': (_parse_float, '0.4', '导引阱深'),
    'trap_depth_hold_mk': (_parse_float, '1.6', '保持阱深（扫描时被覆盖）'),
    'qualification_threshold': (_parse_float, '0.02', '区间鉴定的相对透射阈值'),
    'exit_threshold': (_parse_float, '0.80', '离开判定的相对透射阈值'),
    'max_run_time_ms': (_parse_float, '20', '触发后最长运行时间'),
    'max_flight_time_ms': (_parse_float, '5', '触发前最长飞行时间'),
    'eta_mhz': (_parse_float, '0.44', '探测驱动幅度 η/2π'),
    'probe_enabled': (_parse_bool, 'on', '探测区间是否打开探测光'),
    # 触发
    'trigger_bin_us': (_parse_float, '10', '计数时间窗'),
    'trigger_threshold': (_parse_float, '0.3', '触发的相对计数阈值'),
    'quantum_efficiency': (_parse_float, '0.32', '探测量子效率'),
    'shot_noise': (_parse_bool, 'on', '计数是否带散粒噪声'),
    'trigger_eta_mhz': (_parse_float, '0.99', '触发阶段驱动幅度 η/2π'),
    # 积分器
    'dt_ns': (_parse_float, '1.0', '积分步长'),
    'record_stride': (int, '50', '每多少步记录一次位置'),
    'enable_diffusion': (_parse_bool, 'on', '随机反冲与偶极力涨落'),
    'enable_motion': (_parse_bool, 'on', '原子运动'),
    'excitation_limit': (_parse_float, '0.05', '积分中 |σ|² 的硬上限'),
    # 阱深噪声
    'sigma_eps': (_parse_float, '0.0', '相对阱深噪声幅度（由 calibrate 写入）'),
    'tau_noise_us': (_parse_float, '1.0', '阱深噪声重采样间隔'),
    # 标定
    'target_lifetime_ms': (_parse_float, '30', '无探测光储存时间目标'),
    'calibration_atoms': (int, '200', '标定系综原子数'),
    'calibration_temperature_mk': (_parse_float, '0.2', '标定系综初始温度'),
    'calibration_dt_ns': (_parse_float, '25', '标定积分步长'),
    'calibration_horizon_factor': (_parse_float, '2.5', '观测窗口 / 目标寿命'),
    'calibration_seed': (int, '0', '标定随机种子'),
    'excitation_ceiling': (_parse_float, '0.014', '标定后探测扫描的激发上限'),
    # 精确稳态比较
    'oracle_n_max': (int, '3', '光子数截断'),
    'oracle_n_empty': (_parse_float, '0.0001', '比较时的共振空腔光子数'),
    'oracle_grid_points': (int, '10', '每个失谐轴的网格点数'),
    'oracle_span_mhz': (_parse_float, '40', '失谐网格范围 ±span/2π'),
    'oracle_couplings_mhz': (_parse_float_list, '0, 8, 16', '比较的耦合列表'),
    # 扫描
    'seed': (int, '12345', '主随机种子'),
    'atoms': (int, '50', '每个扫描点的原子数'),
    'detunings_mhz': (_parse_float_list,
                      '-28, -24, -20, -16, -12, -8, -4, 0, 4, 8, 12, 16, 20, 24, 28', '探测失谐列表'),
    'depths_mk': (_parse_float_list, '1.6', '保持阱深列表'),
    'workers': (int, '1', '并行进程数'),
    # 分析
    'coupling_bin_mhz': (_parse_float, '0.5', '耦合直方图分箱宽度'),
}


def default_raw_config() -> dict[str, str]:
    """全部默认值（原文）"""
    return {key: entry[1] for key, entry in CONFIG_SCHEMA.items()}


def parse_config_text(text: str) -> dict[str, str]:
    """解析配置文本，返回原文取值；未出现的键取默认值

    Raises:
        ConfigError: 行格式错误、未知键、重复键或取值无法解析
    """
    raw = default_raw_config()
    seen: set[str] = set()
    for line_no, line in enumerate(text.splitlines(), start=1):
        content = line.split('#', 1)[0].strip()
        if not content:
            continue
        if '=' not in content:
            raise ConfigError(f"缺少 '=': {line.strip()!r}", line=line_no)
        key, value = (part.strip() for part in content.split('=', 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError("未知配置键", line=line_no, field_name=key)
        if key in seen:
            raise ConfigError("配置键重复", line=line_no, field_name=key)
        seen.add(key)
        try:
            CONFIG_SCHEMA[key][0](value)
        except ValueError as e:
            raise ConfigError(f"取值无效 {value!r}: {str(e)}", line=line_no, field_name=key) from e
        raw[key] = value
    return raw


def format_config(raw: dict[str, str]) -> str:
    """按定义顺序输出配置文本（带说明注释）"""
    lines = []
    for key, (_, default, doc) in CONFIG_SCHEMA.items():
        lines.append(f"# {doc}")
        lines.append(f"{key} = {raw.get(key, default)}")
    return '\n'.join(lines) + '\n'


def load_config(path: str = DEFAULT_CONFIG_FILE) -> dict[str, str]:
    """从配置文件加载原文取值（主文件不可读时从备份恢复）

    文件不存在时返回默认值。解析错误不会回退到备份，直接抛出。

    Raises:
        ConfigError: 配置内容无效
    """
    if not os.path.exists(path):
        logger.info(f"配置文件不存在，使用默认值: {path}")
        return default_raw_config()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except (IOError, OSError) as e:
        logger.warning(f"读取配置失败: {str(e)}，尝试从备份恢复")
        backup_file = f"{path}.backup"
        try:
            with open(backup_file, 'r', encoding='utf-8') as f:
                text = f.read()
            logger.info("从备份恢复配置成功")
        except (IOError, OSError) as e2:
            raise ConfigError(f"无法读取配置文件 {path}: {str(e2)}") from e2
    return parse_config_text(text)


def save_config(path: str, raw: dict[str, str]) -> bool:
    """保存配置文本（原子写，防止半写入）

    实现策略：
    1. 写入同目录临时文件
    2. 刷新到磁盘
    3. 备份原文件
    4. 重命名为目标文件
    """
    with _config_lock:
        try:
            config_dir = os.path.dirname(os.path.abspath(path))
            os.makedirs(config_dir, exist_ok=True)
            fd, temp_path = tempfile.mkstemp(dir=config_dir, prefix='.config_tmp_', suffix='.cfg')
            try:
                with os.fdopen(fd, 'w', encoding='utf-8') as f:
                    f.write(format_config(raw))
                    f.flush()
                    os.fsync(f.fileno())

                if os.path.exists(path):
                    try:
                        shutil.copy2(path, f"{path}.backup")
                    except (IOError, OSError) as e:
                        logger.warning(f"备份配置失败: {str(e)}")

                os.replace(temp_path, path)
                return True
            except (IOError, OSError):
                try:
                    if os.path.exists(temp_path):
                        os.remove(temp_path)
                except (IOError, OSError):
                    pass
                raise
        except (IOError, OSError) as e:
            logger.error(f"保存配置失败: {str(e)}")
            return False


@dataclass(frozen=True)
class OracleSettings:
    """精确稳态比较的网格设定（SI）"""
    n_max: int = 3
    n_empty: float = 1e-4
    grid_points: int = 10
    span: float = mhz_to_angular(40.0)
    couplings: tuple[float, ...] = (0.0, mhz_to_angular(8.0), mhz_to_angular(16.0))

    def eta(self, params: PhysicalParams) -> float:
        """共振空腔光子数为 n_empty 时的驱动幅度"""
        return params.kappa * math.sqrt(self.n_empty)

    def detuning_grid(self) -> list[float]:
        if self.grid_points < 2:
            return [0.0]
        step = 2.0 * self.span / (self.grid_points - 1)
        return [-self.span + i * step for i in range(self.grid_points)]


@dataclass(frozen=True)
class SweepSettings:
    """扫描设定（SI）"""
    seed: int = 12345
    atoms: int = 50
    detunings: tuple[float, ...] = (0.0,)
    depths: tuple[float, ...] = (mk_to_joule(1.6),)
    workers: int = 1


@dataclass(frozen=True)
class AnalysisSettings:
    coupling_bin: float = mhz_to_angular(0.5)


@dataclass(frozen=True)
class SimulationConfig:
    """配置文本换算为 SI 后的全部设定"""
    raw: dict[str, str]
    params: PhysicalParams
    protocol: ProtocolConfig
    integrator: IntegratorConfig
    noise: TrapNoiseProcess
    calibration: CalibrationFixture
    target_lifetime: float
    excitation_ceiling: float
    oracle: OracleSettings
    sweep: SweepSettings
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    @classmethod
    def from_raw(cls, raw: dict[str, str]) -> 'SimulationConfig':
        """把原文取值换算为 SI 数据类

        Raises:
            ConfigError: 取值无法解析或超出允许范围（field_name 为出错的键，无法定位时为 None）
        """
        values: dict[str, Any] = {}
        for key, (parse, default, _) in CONFIG_SCHEMA.items():
            text = raw.get(key, default)
            try:
                values[key] = parse(text)
            except ValueError as e:
                raise ConfigError(f"取值无效 {text!r}: {str(e)}", field_name=key) from e
        for key in raw:
            if key not in CONFIG_SCHEMA:
                raise ConfigError("未知配置键", field_name=key)
        v = values

        def build(name: str, factory: Callable[[], Any]) -> Any:
            try:
                return factory()
            except ValueError as e:
                raise ConfigError(f"{name} 设定无效: {str(e)}") from e

        params = build('物理参数', lambda: PhysicalParams(
            g0=mhz_to_angular(v['g0_mhz']),
            gamma=mhz_to_angular(v['gamma_mhz']),
            kappa=mhz_to_angular(v['kappa_mhz']),
            lambda_probe=v['lambda_probe_nm'] * 1e-9,
            lambda_trap=v['lambda_trap_nm'] * 1e-9,
            waist=v['waist_um'] * 1e-6,
            cavity_length=v['cavity_length_um'] * 1e-6,
            finesse=v['finesse'],
            atom_mass=v['atom_mass_amu'] * AMU,
            delta_a0=mhz_to_angular(v['delta_a0_mhz']),
            stark_per_depth=_stark_per_depth(v['stark_reference_mhz'], v['stark_reference_depth_mk']),
            gravity=v['gravity_m_s2'],
        ))
        trigger = build('触发', lambda: TriggerConfig(
            bin_time=us_to_s(v['trigger_bin_us']),
            threshold_rel=v['trigger_threshold'],
            quantum_efficiency=v['quantum_efficiency'],
            use_shot_noise=v['shot_noise'],
            eta_override=mhz_to_angular(v['trigger_eta_mhz']),
        ))
        protocol = build('流程', lambda: ProtocolConfig(
            cooling_duration=us_to_s(v['cooling_us']),
            probe_duration=us_to_s(v['probe_us']),
            probe_delta_c=mhz_to_angular(v['probe_delta_c_mhz']),
            trap_depth_guide=mk_to_joule(v['trap_depth_guide_mk']),
            trap_depth_hold=mk_to_joule(v['trap_depth_hold_mk']),
            qualification_threshold=v['qualification_threshold'],
            exit_threshold=v['exit_threshold'],
            trigger=trigger,
            max_run_time=v['max_run_time_ms'] * 1e-3,
            eta=mhz_to_angular(v['eta_mhz']),
            probe_enabled=v['probe_enabled'],
            max_flight_time=v['max_flight_time_ms'] * 1e-3,
        ))
        integrator = build('积分器', lambda: IntegratorConfig(
            dt=ns_to_s(v['dt_ns']),
            record_stride=v['record_stride'],
            rng_seed=v['seed'],
            enable_diffusion=v['enable_diffusion'],
            enable_motion=v['enable_motion'],
            enable_gravity=v['gravity_m_s2'] > 0,
            excitation_limit=v['excitation_limit'],
        ))
        noise = build('阱深噪声', lambda: TrapNoiseProcess(
            sigma_eps=v['sigma_eps'], tau_noise=us_to_s(v['tau_noise_us'])))
        calibration = build('标定', lambda: CalibrationFixture(
            trap_depth=mk_to_joule(v['trap_depth_hold_mk']),
            n_atoms=v['calibration_atoms'],
            temperature=mk_to_joule(v['calibration_temperature_mk']),
            dt=ns_to_s(v['calibration_dt_ns']),
            horizon_factor=v['calibration_horizon_factor'],
            tau_noise=us_to_s(v['tau_noise_us']),
            seed=v['calibration_seed'],
        ))
        if v['target_lifetime_ms'] <= 0:
            raise ConfigError("目标寿命必须为正", field_name='target_lifetime_ms')
        if not 0 < v['excitation_ceiling'] < v['excitation_limit']:
            raise ConfigError("激发上限必须在 (0, excitation_limit) 内", field_name='excitation_ceiling')
        if v['oracle_n_max'] < 1 or v['oracle_grid_points'] < 1 or v['oracle_n_empty'] <= 0:
            raise ConfigError("精确稳态比较设定无效", field_name='oracle_n_max')
        if any(g < 0 for g in v['oracle_couplings_mhz']):
            raise ConfigError("耦合不能为负", field_name='oracle_couplings_mhz')
        if v['atoms'] < 1:
            raise ConfigError("每个扫描点至少需要 1 个原子", field_name='atoms')
        if v['workers'] < 1:
            raise ConfigError("并行进程数至少为 1", field_name='workers')
        if any(d <= 0 for d in v['depths_mk']):
            raise ConfigError("保持阱深必须为正", field_name='depths_mk')
        if v['coupling_bin_mhz'] <= 0:
            raise ConfigError("分箱宽度必须为正", field_name='coupling_bin_mhz')

        oracle = OracleSettings(
            n_max=v['oracle_n_max'],
            n_empty=v['oracle_n_empty'],
            grid_points=v['oracle_grid_points'],
            span=mhz_to_angular(v['oracle_span_mhz']),
            couplings=tuple(mhz_to_angular(g) for g in v['oracle_couplings_mhz']),
        )
        sweep = SweepSettings(
            seed=v['seed'],
            atoms=v['atoms'],
            detunings=tuple(mhz_to_angular(d) for d in v['detunings_mhz']),
            depths=tuple(mk_to_joule(d) for d in v['depths_mk']),
            workers=v['workers'],
        )
        return cls(
            raw=dict(raw),
            params=params,
            protocol=protocol,
            integrator=integrator,
            noise=noise,
            calibration=calibration,
            target_lifetime=v['target_lifetime_ms'] * 1e-3,
            excitation_ceiling=v['excitation_ceiling'],
            oracle=oracle,
            sweep=sweep,
            analysis=AnalysisSettings(coupling_bin=mhz_to_angular(v['coupling_bin_mhz'])),
        )

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(params=self.params, protocol=self.protocol,
                                integrator=self.integrator, noise=self.noise)

    def with_overrides(self, **overrides: str) -> 'SimulationConfig':
        """用原文覆盖若干键后重新换算（命令行参数使用）"""
        raw = dict(self.raw)
        for key, value in overrides.items():
            if key not in CONFIG_SCHEMA:
                raise ConfigError("未知配置键", field_name=key)
            try:
                CONFIG_SCHEMA[key][0](value)
            except ValueError as e:
                raise ConfigError(f"取值无效 {value!r}: {str(e)}", field_name=key) from e
            raw[key] = value
        return SimulationConfig.from_raw(raw)


def _stark_per_depth(stark_mhz: float, depth_mk: float) -> float:
    """波腹 Stark 频移（rad/s）与峰值阱深（J）之比乘 ħ"""
    if depth_mk <= 0:
        raise ValueError(f"Stark 参考阱深必须为正: {depth_mk}")
    return mhz_to_angular(stark_mhz) / (mk_to_joule(depth_mk) / HBAR)
