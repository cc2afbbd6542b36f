"""任务状态模块 - 状态常量定义"""


class TaskStatus:
    """扫描任务状态常量"""
    PENDING = "等待中"
    RUNNING = "运行中"
    DONE = "已完成"
    FAILED = "失败"
