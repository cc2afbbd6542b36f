"""结果存档模块 - 原子结果的逐行 JSON 存档与运行清单（带脏数据标志的定量刷新）"""

import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

from constants import AppConstants
from protocol import AtomRunResult
from utils import ensure_dir

logger = logging.getLogger(__name__)


class ResultWriter:
    """原子结果存档写入器

    追加的结果先进入内存缓冲，累计 flush_every 条或显式 flush()/close() 时写盘。
    1. 脏数据标志：没有新结果时 flush() 不做 I/O
    2. 每次写盘后 fsync，进程中断时最多丢失一个缓冲批次
    """

    def __init__(self, path: str, flush_every: int = AppConstants.SWEEP_CONFIG['results_flush_every']) -> None:
        if flush_every < 1:
            raise ValueError(f"刷新间隔必须 ≥ 1: {flush_every}")
        self._path = path
        self._flush_every = flush_every
        self._pending: list[str] = []
        self._is_dirty = False
        self._written = 0
        self._last_flush_time = 0.0
        self._closed = False
        ensure_dir(os.path.dirname(os.path.abspath(path)))
        # 新的运行覆盖旧存档
        with open(path, 'w', encoding='utf-8'):
            pass

    @property
    def path(self) -> str:
        return self._path

    def append(self, result: AtomRunResult) -> None:
        """追加一条结果"""
        if self._closed:
            raise RuntimeError("存档已关闭")
        self._pending.append(json.dumps(result.to_dict(), ensure_ascii=False, sort_keys=True))
        self._is_dirty = True
        if len(self._pending) >= self._flush_every:
            self.flush()

    def flush(self) -> bool:
        """把缓冲写入文件

        Returns:
            bool: 写入是否成功（失败时保留缓冲，稍后重试）
        """
        if not self._is_dirty:
            return True
        try:
            with open(self._path, 'a', encoding='utf-8') as f:
                for line in self._pending:
                    f.write(line)
                    f.write('\n')
                f.flush()
                os.fsync(f.fileno())
        except (IOError, OSError) as e:
            logger.warning(f"结果存档写入失败: {str(e)}")
            return False
        self._written += len(self._pending)
        self._pending = []
        self._is_dirty = False
        self._last_flush_time = time.time()
        return True

    def close(self) -> bool:
        """刷新并关闭"""
        if self._closed:
            return True
        ok = self.flush()
        self._closed = True
        if not ok:
            logger.error(f"结果存档关闭时仍有 {len(self._pending)} 条未写入")
        return ok

    def __enter__(self) -> 'ResultWriter':
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()

    def get_stats(self) -> dict:
        """获取写入统计信息"""
        return {
            'is_dirty': self._is_dirty,
            'pending': len(self._pending),
            'written': self._written,
            'last_flush_time': self._last_flush_time,
        }


def read_results(path: str) -> list[AtomRunResult]:
    """读取结果存档

    Raises:
        ValueError: 某行不是合法 JSON 或格式版本不符（带行号）
    """
    results = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                results.append(AtomRunResult.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise ValueError(f"{path} 第 {line_no} 行无法解析: {str(e)}") from e
    return results


@dataclass
class RunManifest:
    """运行清单：复现全部输出所需的信息"""
    command: str
    config: dict[str, str]
    master_seed: int
    code_version: str = AppConstants.VERSION
    schema_version: int = AppConstants.SCHEMA_VERSION
    outputs: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    integration_steps: int = 0
    failed_tasks: list[list[int]] = field(default_factory=list)
    log_stats: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    fits: dict[str, Any] = field(default_factory=dict)
    notes: dict[str, Any] = field(default_factory=dict)
    exit_code: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


def write_manifest(path: str, manifest: RunManifest) -> bool:
    """原子写入运行清单（临时文件 + fsync + 重命名）"""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, temp_path = tempfile.mkstemp(dir=directory, prefix='.manifest_tmp_', suffix='.json')
        try:
            with os.fdopen(fd, 'w', encoding='utf-8') as f:
                json.dump(manifest.to_dict(), f, ensure_ascii=False, indent=2)
                f.flush()
                os.fsync(f.fileno())
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
        logger.error(f"写入运行清单失败: {str(e)}")
        return False


def read_manifest(path: str) -> dict:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
