# models.py
from datetime import datetime

from sqlalchemy import (
    Column, Integer, String, Boolean,
    DateTime, Float, ForeignKey, JSON
)
from sqlalchemy.orm import DeclarativeBase, relationship


class Base(DeclarativeBase):
    pass


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    output_dir = Column(String(1024), nullable=False, index=True)
    config_hash = Column(String(64), nullable=False)
    seed = Column(Integer, nullable=False)
    robust = Column(String(16), nullable=False, default="gnc_tls")
    created_at = Column(DateTime, default=datetime.utcnow)

    cells = relationship("MatrixCell", back_populates="run", cascade="all, delete")


class MatrixCell(Base):
    __tablename__ = "matrix_cells"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    robot_a = Column(Integer, nullable=False)
    robot_b = Column(Integer, nullable=False)
    use_filter = Column(Boolean, nullable=False)
    use_pcm = Column(Boolean, nullable=False)
    robust = Column(String(16), nullable=False)
    status = Column(String(16), default="ok")  # ok, failed
    report = Column(JSON, nullable=False)  # CellResult.to_dict()
    elapsed_s = Column(Float, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("Run", back_populates="cells")

    @property
    def pair(self) -> tuple[int, int]:
        return self.robot_a, self.robot_b
