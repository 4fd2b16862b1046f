from sqlalchemy import Column, Integer, String, Text, DateTime, Float, ForeignKey, JSON
from sqlalchemy.orm import declarative_base, relationship
from datetime import datetime
import uuid

Base = declarative_base()


class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(String, primary_key=True, default=lambda: str(uuid.uuid4()))
    command = Column(String, nullable=False)  # "priorfit", "evaluate", "finetune", "circles", "report", "generate"
    status = Column(String, default="completed")  # "completed", "failed"
    tool_version = Column(String, nullable=False)
    seed = Column(Integer, nullable=True)
    output_dir = Column(Text, nullable=True)
    config = Column(JSON, default=dict)
    wallclock_ms = Column(JSON, default=dict)
    total_ms = Column(Float, default=0.0)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    # Relationships
    artifacts = relationship("ArtifactRecord", back_populates="run", cascade="all, delete-orphan")


class ArtifactRecord(Base):
    __tablename__ = "artifacts"

    id = Column(Integer, primary_key=True)
    run_id = Column(String, ForeignKey("runs.id"), nullable=False)
    path = Column(Text, nullable=False)
    kind = Column(String, default="output")  # "checkpoint", "log", "records", "aggregates", "manifest", ...
    sha256 = Column(String(64), nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)

    # Relationships
    run = relationship("RunRecord", back_populates="artifacts")
