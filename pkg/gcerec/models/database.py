from sqlalchemy import create_engine, Column, Integer, String, Float, DateTime, Text
from sqlalchemy.orm import declarative_base, sessionmaker, Session
from sqlalchemy.engine import Engine
from datetime import datetime, timezone
from typing import Iterator, List
from contextlib import contextmanager

Base = declarative_base()


class GridCell(Base):
    """网格搜索单元结果"""
    __tablename__ = "grid_cells"

    id = Column(Integer, primary_key=True, index=True)
    run_name = Column(String(100), nullable=False, index=True, comment="实验名")
    model_tag = Column(String(50), nullable=False, comment="模型-嵌入组合")
    cell_index = Column(Integer, nullable=False, comment="网格单元下标")
    learning_rate = Column(Float, nullable=False, comment="学习率")
    batch_size = Column(Integer, nullable=False, comment="批大小")
    dropout = Column(Float, nullable=False, comment="dropout")
    status = Column(String(10), nullable=False, comment="ok / failed")
    val_ndcg10 = Column(Float, comment="验证集 NDCG@10")
    val_hr10 = Column(Float, comment="验证集 HR@10")
    best_epoch = Column(Integer, comment="最佳 epoch")
    error = Column(Text, comment="失败原因")
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc), comment="创建时间")


def get_engine(database_url: str) -> Engine:
    """创建数据库引擎并建表"""
    engine = create_engine(database_url, echo=False)
    create_tables(engine)
    return engine


def create_tables(engine: Engine):
    """创建数据库表"""
    Base.metadata.create_all(bind=engine)


@contextmanager
def session_scope(engine: Engine) -> Iterator[Session]:
    """获取数据库会话，正常退出时提交"""
    db = sessionmaker(autocommit=False, autoflush=False, bind=engine)()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


def ranked_cells(db: Session, run_name: str, model_tag: str) -> List[GridCell]:
    """按验证集 NDCG@10 降序列出成功的单元，失败单元排在最后"""
    ok = db.query(GridCell).filter(
        GridCell.run_name == run_name,
        GridCell.model_tag == model_tag,
        GridCell.status == "ok"
    ).order_by(GridCell.val_ndcg10.desc(), GridCell.cell_index.asc()).all()
    failed = db.query(GridCell).filter(
        GridCell.run_name == run_name,
        GridCell.model_tag == model_tag,
        GridCell.status == "failed"
    ).order_by(GridCell.cell_index.asc()).all()
    return ok + failed
