from datetime import datetime

from sqlalchemy import JSON, Column, DateTime, Integer, String
from sqlalchemy.orm import declarative_base

Base = declarative_base()


class EmbeddingRecord(Base):
    __tablename__ = "embeddings"

    id = Column(Integer, primary_key=True, index=True)
    tag = Column(String, nullable=False, index=True)
    filename = Column(String, nullable=False)
    file_path = Column(String, nullable=False)
    ids_path = Column(String)
    format = Column(String, nullable=False)  # npy, csv, rawf32
    rows = Column(Integer)
    dims = Column(Integer)
    summary = Column(JSON)
    uploaded_at = Column(DateTime, default=datetime.utcnow)


class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    config = Column(JSON, nullable=False)
    output_dir = Column(String)
    status = Column(String, default="running")  # running, finished, failed
    exit_code = Column(Integer)
    failures = Column(JSON)
    created_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime)


class ReportRecord(Base):
    __tablename__ = "reports"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, nullable=False, index=True)
    name = Column(String, nullable=False)  # path relative to the run's output directory
    path = Column(String, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)
