"""扫描管理器文件 - (阱深, 失谐, 原子序号) 任务队列的串行/多进程执行与按键合并"""
# pyright: reportAny=false

import logging
import time
from dataclasses import dataclass, replace
from multiprocessing import Pool
from typing import Callable, Optional, Sequence

from constants import AppConstants
from physics_core import ModelValidityError
from protocol import AtomRunResult, ExperimentConfig, run_atom
from result_store import ResultWriter
from task_state import TaskStatus

logger = logging.getLogger(__name__)


class SweepAbortedError(Exception):
    """失败轨迹比例超过上限"""

    def __init__(self, message: str, failed: list[tuple[int, int, int]]) -> None:
        super().__init__(message)
        self.failed = failed


@dataclass(frozen=True)
class SweepTask:
    """一个原子流程任务"""
    depth_index: int
    detuning_index: int
    atom_index: int
    trap_depth_hold: float
    delta_c: float
    status: str = TaskStatus.PENDING
    error: str = ""

    @property
    def key(self) -> tuple[int, int, int]:
        return self.depth_index, self.detuning_index, self.atom_index


def _run_task(args: tuple[ExperimentConfig, int, SweepTask]) -> tuple[SweepTask, Optional[AtomRunResult]]:
    """工作进程入口（模块级函数，可被 pickle）

    模型失效的轨迹记为失败并返回 None；其他异常向上抛出。
    """
    config, master_seed, task = args
    point = config.for_point(task.delta_c, task.trap_depth_hold)
    try:
        result = run_atom(point, master_seed, task.atom_index, task.depth_index, task.detuning_index)
    except ModelValidityError as e:
        return replace(task, status=TaskStatus.FAILED, error=str(e)), None
    return replace(task, status=TaskStatus.DONE), result


class SweepManager:
    """扫描管理器，负责构造任务、执行并合并结果

    每个任务的随机流只由 (master_seed, 任务键) 决定，进程数不影响任何数值结果。
    """

    def __init__(self, config: ExperimentConfig, master_seed: int,
                 failure_limit: float = AppConstants.SWEEP_CONFIG['failure_fraction_limit']) -> None:
        self.config = config
        self.master_seed = master_seed
        self.failure_limit = failure_limit
        self.tasks: list[SweepTask] = []
        self.results: list[AtomRunResult] = []
        self.wall_clock = 0.0

    def build_tasks(self, depths: Sequence[float], detunings: Sequence[float], atoms: int) -> list[SweepTask]:
        """按 (阱深, 失谐, 原子) 顺序构造任务列表

        Raises:
            ValueError: 原子数小于 1 或列表为空
        """
        if atoms < 1:
            raise ValueError(f"每个扫描点至少需要 1 个原子: {atoms}")
        if not depths or not detunings:
            raise ValueError("阱深与失谐列表不能为空")
        self.tasks = [SweepTask(i, j, k, depth, delta_c)
                      for i, depth in enumerate(depths)
                      for j, delta_c in enumerate(detunings)
                      for k in range(atoms)]
        self.results = []
        return self.tasks

    def run(self, workers: int = 1, writer: Optional[ResultWriter] = None,
            progress: Optional[Callable[[int, int], None]] = None) -> list[AtomRunResult]:
        """执行全部任务

        Args:
            workers: 进程数，1 表示在当前进程串行执行
            writer: 可选的结果存档（按任务顺序追加）
            progress: 可选的进度回调 (完成数, 总数)

        Returns:
            list[AtomRunResult]: 按任务键排序的成功结果

        Raises:
            SweepAbortedError: 失败比例超过上限
        """
        if not self.tasks:
            raise ValueError("没有任务，请先调用 build_tasks")
        self.config.integrator.check_stability(self.config.params)
        start = time.time()
        total = len(self.tasks)
        # 派发前标记为运行中
        self.tasks = [replace(task, status=TaskStatus.RUNNING, error="") for task in self.tasks]
        args = [(self.config, self.master_seed, task) for task in self.tasks]
        logger.info(f"开始扫描: {total} 个任务, {workers} 个进程, 主种子 {self.master_seed}")

        finished: list[SweepTask] = []
        results: list[AtomRunResult] = []
        report_every = max(1, total // 10)

        def collect(outcome: tuple[SweepTask, Optional[AtomRunResult]]) -> None:
            task, result = outcome
            finished.append(task)
            if result is not None:
                results.append(result)
                if writer is not None:
                    writer.append(result)
            else:
                logger.warning(f"任务 {task.key} 失败: {task.error}")
            done = len(finished)
            if progress is not None:
                progress(done, total)
            if done % report_every == 0 or done == total:
                logger.info(f"扫描进度: {done}/{total}")

        if workers <= 1:
            for item in args:
                collect(_run_task(item))
        else:
            chunk = AppConstants.SWEEP_CONFIG['chunk_size']
            with Pool(workers) as pool:
                # imap 按提交顺序返回，存档顺序与进程数无关
                for outcome in pool.imap(_run_task, args, chunksize=chunk):
                    collect(outcome)

        if writer is not None:
            writer.flush()
        self.tasks = finished
        self.results = sorted(results, key=lambda r: r.key)
        self.wall_clock = time.time() - start
        logger.info(f"扫描完成: 成功 {len(self.results)}, 失败 {len(self.failed_keys())}, "
                    f"用时 {self.wall_clock:.1f} s")

        fraction = self.failure_fraction()
        if fraction > self.failure_limit:
            raise SweepAbortedError(
                f"失败轨迹比例 {fraction:.2%} 超过上限 {self.failure_limit:.2%}", self.failed_keys())
        return self.results

    def failed_keys(self) -> list[tuple[int, int, int]]:
        return sorted(task.key for task in self.tasks if task.status == TaskStatus.FAILED)

    def failure_fraction(self) -> float:
        """已执行任务中失败的比例"""
        executed = [task for task in self.tasks if task.status in (TaskStatus.DONE, TaskStatus.FAILED)]
        if not executed:
            return 0.0
        return sum(1 for task in executed if task.status == TaskStatus.FAILED) / len(executed)

    def total_steps(self) -> int:
        return sum(result.steps for result in self.results)
