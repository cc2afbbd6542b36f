"""腔中单原子半经典蒙特卡罗模拟主包"""
