# pyright: reportAny=false
"""日志管理文件 - 在标准 logging 之上提供结构化缓冲与按级别统计"""
import logging
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from functools import total_ordering
from typing import List, Optional

from constants import AppConstants


@total_ordering
class LogLevel(Enum):
    """日志级别枚举，取值与 logging 模块一致"""
    DEBUG = logging.DEBUG
    INFO = logging.INFO
    WARNING = logging.WARNING
    ERROR = logging.ERROR
    CRITICAL = logging.CRITICAL

    def __str__(self):
        return self.name

    @classmethod
    def from_name(cls, name: str) -> 'LogLevel':
        """从名称转换（不区分大小写）"""
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"未知日志级别: {name}") from None

    @classmethod
    def from_record(cls, record: logging.LogRecord) -> 'LogLevel':
        for level in reversed(list(cls)):
            if record.levelno >= level.value:
                return level
        return cls.DEBUG

    def __lt__(self, other):
        if isinstance(other, LogLevel):
            return self.value < other.value
        return NotImplemented


@dataclass
class StructuredLogEntry:
    """结构化日志条目"""
    timestamp: float
    source: str
    level: LogLevel
    message: str
    metadata: Optional[dict] = None

    def to_formatted_string(self) -> str:
        """转换为格式化的日志字符串"""
        time_str = time.strftime("%H:%M:%S", time.localtime(self.timestamp))
        source_tag = f"[{self.source}] " if self.source else ""
        return f"[{time_str}] [{self.level.name}] {source_tag}{self.message}"


class _BufferHandler(logging.Handler):
    """把日志记录转交给 LogManager 的缓冲区"""

    def __init__(self, manager: 'LogManager') -> None:
        super().__init__(level=logging.DEBUG)
        self._manager = manager

    def emit(self, record: logging.LogRecord) -> None:
        try:
            self._manager.record(StructuredLogEntry(
                timestamp=record.created,
                source=record.name,
                level=LogLevel.from_record(record),
                message=record.getMessage(),
                metadata={'process': record.process} if record.process else None,
            ))
        except Exception:
            self.handleError(record)


class LogManager:
    """日志管理类（线程安全，支持日志级别）

    setup() 在根 logger 上安装控制台、run.log 文件与缓冲三个处理器；
    各计算模块只通过 logging.getLogger(__name__) 记录日志。
    """

    def __init__(self, buffer_size: int = AppConstants.LOG_CONFIG['buffer_size']) -> None:
        # 日志缓冲区，用于存储最近的结构化日志
        self.log_buffer: List[StructuredLogEntry] = []
        self._buffer_size = buffer_size
        # 线程锁，保护日志缓冲区并发访问
        self._buffer_lock = threading.Lock()
        # 最小日志级别（用于过滤缓冲）
        self._min_level = LogLevel.DEBUG
        # 按级别计数（不受缓冲区大小限制）
        self._counts = {level.name: 0 for level in LogLevel}
        self._handlers: List[logging.Handler] = []
        self.log_file: Optional[str] = None

    def setup(self, out_dir: Optional[str] = None, level: LogLevel = LogLevel.INFO) -> None:
        """安装日志处理器

        Args:
            out_dir: 输出目录，给出时写 run.log
            level: 控制台与文件的最小级别
        """
        self.shutdown()
        cfg = AppConstants.LOG_CONFIG
        root = logging.getLogger()
        root.setLevel(logging.DEBUG)
        self._min_level = level

        console = logging.StreamHandler()
        console.setLevel(level.value)
        console.setFormatter(logging.Formatter(cfg['console_format'], cfg['date_format']))
        self._handlers.append(console)

        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self.log_file = os.path.join(out_dir, AppConstants.OUTPUT_FILES['run_log'])
            file_handler = logging.FileHandler(self.log_file, encoding='utf-8')
            file_handler.setLevel(level.value)
            file_handler.setFormatter(logging.Formatter(cfg['file_format']))
            self._handlers.append(file_handler)

        self._handlers.append(_BufferHandler(self))
        for handler in self._handlers:
            root.addHandler(handler)

    def shutdown(self) -> None:
        """移除并关闭本管理器安装的处理器"""
        root = logging.getLogger()
        for handler in self._handlers:
            root.removeHandler(handler)
            try:
                handler.close()
            except Exception as e:
                print(f"关闭日志处理器失败: {str(e)}")
        self._handlers = []

    def record(self, entry: StructuredLogEntry) -> None:
        """记录一条结构化日志：计数并写入缓冲区"""
        if entry.level < self._min_level:
            return

        with self._buffer_lock:
            self._counts[entry.level.name] += 1
            self.log_buffer.append(entry)
            # 限制缓冲区大小，避免内存占用过高
            if len(self.log_buffer) > self._buffer_size:
                self.log_buffer = self.log_buffer[-self._buffer_size:]

    def get_logs(self, level: Optional[LogLevel] = None,
                 source: Optional[str] = None,
                 limit: int = 1000) -> List[StructuredLogEntry]:
        """按最小级别与来源筛选最近的日志"""
        with self._buffer_lock:
            entries = list(self.log_buffer)
        if level is not None:
            entries = [e for e in entries if e.level >= level]
        if source is not None:
            entries = [e for e in entries if e.source == source]
        return entries[-limit:] if limit > 0 else []

    def get_stats(self) -> dict:
        """获取日志统计信息（各级别条数）"""
        with self._buffer_lock:
            return dict(self._counts)
