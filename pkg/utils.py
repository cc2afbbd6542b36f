"""工具函数文件 - 单位换算、随机数流与步数换算"""

import logging
import math
import os

import numpy as np

from constants import KB, TWO_PI

# 配置日志
logger = logging.getLogger(__name__)

_MHZ = 1e6


def mhz_to_angular(f_mhz: float) -> float:
    """普通频率（MHz）转角频率（rad/s），2π 只在这里乘一次"""
    return TWO_PI * f_mhz * _MHZ


def angular_to_mhz(omega: float) -> float:
    """角频率（rad/s）转普通频率（MHz）"""
    return omega / (TWO_PI * _MHZ)


def mk_to_joule(t_mk: float) -> float:
    """温度单位的能量（mK）转焦耳"""
    return KB * t_mk * 1e-3


def joule_to_mk(energy: float) -> float:
    """焦耳转温度单位的能量（mK）"""
    return energy / KB * 1e3


def us_to_s(t_us: float) -> float:
    return t_us * 1e-6


def ns_to_s(t_ns: float) -> float:
    return t_ns * 1e-9


def steps_for(duration: float, dt: float) -> int:
    """把时长换算为整数步数

    Args:
        duration: 时长（s）
        dt: 步长（s）

    Returns:
        int: 步数

    Raises:
        ValueError: 时长不是步长的整数倍
    """
    if dt <= 0:
        raise ValueError(f"步长必须为正: {dt}")
    ratio = duration / dt
    steps = int(round(ratio))
    if steps < 0 or abs(ratio - steps) > 1e-6 * max(1.0, ratio):
        raise ValueError(f"时长 {duration:g} s 不是步长 {dt:g} s 的整数倍")
    return steps


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """由主种子和任务键派生独立随机数发生器

    同一 (master_seed, key) 总是得到同一随机流，与并行方式无关。

    Args:
        master_seed: 主种子
        *key: 任务键（非负整数）

    Returns:
        np.random.Generator: 随机数发生器
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)


class RandomStream:
    """带缓冲的随机数流，供逐步积分的标量内循环使用

    预先成批生成均匀分布与标准正态随机数，避免每步调用发生器的开销。
    """

    BUFFER_SIZE = 4096

    def __init__(self, generator: np.random.Generator) -> None:
        self.generator = generator
        self._uniform: list[float] = []
        self._uniform_pos = 0
        self._normal: list[float] = []
        self._normal_pos = 0

    @classmethod
    def from_seed(cls, master_seed: int, *key: int) -> 'RandomStream':
        return cls(derive_rng(master_seed, *key))

    def uniform(self) -> float:
        """[0, 1) 均匀随机数"""
        if self._uniform_pos >= len(self._uniform):
            self._uniform = self.generator.random(self.BUFFER_SIZE).tolist()
            self._uniform_pos = 0
        value = self._uniform[self._uniform_pos]
        self._uniform_pos += 1
        return value

    def normal(self) -> float:
        """标准正态随机数"""
        if self._normal_pos >= len(self._normal):
            self._normal = self.generator.standard_normal(self.BUFFER_SIZE).tolist()
            self._normal_pos = 0
        value = self._normal[self._normal_pos]
        self._normal_pos += 1
        return value

    def poisson(self, lam: float) -> int:
        """泊松随机数，均值不为正时为 0"""
        if lam <= 0.0:
            return 0
        return int(self.generator.poisson(lam))

    def unit_vector(self) -> tuple[float, float, float]:
        """三维各向同性随机单位矢量"""
        cos_theta = 2.0 * self.uniform() - 1.0
        phi = TWO_PI * self.uniform()
        sin_theta = math.sqrt(max(0.0, 1.0 - cos_theta * cos_theta))
        return sin_theta * math.cos(phi), sin_theta * math.sin(phi), cos_theta


def ensure_dir(path: str) -> str:
    """确保目录存在

    Args:
        path: 目录路径

    Returns:
        str: 目录的绝对路径
    """
    path = os.path.abspath(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        logger.error(f"创建目录失败 {path}: {str(e)}")
        raise
    return path


def relative_error(value: complex, reference: complex, floor: float) -> float:
    """相对误差 |value - reference| / max(|reference|, floor)"""
    return abs(value - reference) / max(abs(reference), floor)
