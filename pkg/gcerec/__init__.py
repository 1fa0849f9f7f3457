"""图卷积嵌入 (GCE) 上下文感知推荐"""

__version__ = "0.1.0"
