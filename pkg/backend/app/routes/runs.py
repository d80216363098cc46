import logging
import os
import shutil
from datetime import datetime

from fastapi import APIRouter, Body, Depends, HTTPException
from fastapi.responses import FileResponse
from sqlalchemy.orm import Session

from ..config import get_settings
from ..database import get_db
from ..errors import ConfigInvalid, RepmetricError
from ..models import ReportRecord, RunRecord
from ..schemas import parse_run_config
from ..services.reports import load_json
from ..services.runner import run

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api", tags=["runs"])


def _run_or_404(db: Session, run_id: int) -> RunRecord:
    record = db.query(RunRecord).filter(RunRecord.id == run_id).first()
    if not record:
        raise HTTPException(status_code=404, detail="Run not found")
    return record


def _reports_of(db: Session, run_id: int):
    return db.query(ReportRecord).filter(ReportRecord.run_id == run_id).order_by(ReportRecord.name).all()


def _describe(record: RunRecord, reports) -> dict:
    return {
        "id": record.id,
        "status": record.status,
        "exit_code": record.exit_code,
        "failures": record.failures or {},
        "reports": [r.name for r in reports],
        "created_at": record.created_at.isoformat(),
        "finished_at": record.finished_at.isoformat() if record.finished_at else None,
    }


# --------------------------
# Submit a run
# --------------------------

@router.post("/runs")
def create_run(payload: dict = Body(...), db: Session = Depends(get_db)):
    """Validate a run configuration, execute it and register its report files."""
    try:
        config = parse_run_config(payload)
        config.validate_paths()
    except ConfigInvalid as e:
        raise HTTPException(status_code=422, detail=f"Invalid run configuration: {str(e)}")

    record = RunRecord(config=payload)
    db.add(record)
    db.commit()
    db.refresh(record)

    output_dir = os.path.join(get_settings().upload_dir, "runs", str(record.id))
    try:
        summary = run(config, output_dir=output_dir)
    except RepmetricError as e:
        record.status = "failed"
        record.failures = {"run": str(e)}
        record.finished_at = datetime.utcnow()
        db.commit()
        raise HTTPException(status_code=400, detail=f"Run failed: {str(e)}")
    except Exception as e:
        logger.exception("Run #%d crashed", record.id)
        record.status = "failed"
        record.failures = {"run": str(e)}
        record.finished_at = datetime.utcnow()
        db.commit()
        raise HTTPException(status_code=500, detail=f"Run failed: {str(e)}")

    record.output_dir = output_dir
    record.exit_code = summary.exit_code
    record.failures = summary.failures
    record.status = "finished" if summary.exit_code == 0 else "failed"
    record.finished_at = datetime.utcnow()
    for path in summary.reports:
        db.add(ReportRecord(run_id=record.id, name=os.path.relpath(path, output_dir), path=path))
    db.commit()
    logger.info("Run #%d finished with exit code %d", record.id, summary.exit_code)

    return _describe(record, _reports_of(db, record.id))


# --------------------------
# List runs
# --------------------------

@router.get("/runs")
def get_runs(db: Session = Depends(get_db)):
    runs = db.query(RunRecord).all()
    return {
        "count": len(runs),
        "runs": [_describe(r, _reports_of(db, r.id)) for r in runs],
    }


# --------------------------
# Get a run
# --------------------------

@router.get("/runs/{run_id}")
def get_run(run_id: int, db: Session = Depends(get_db)):
    record = _run_or_404(db, run_id)
    return {**_describe(record, _reports_of(db, run_id)), "config": record.config}


# --------------------------
# Fetch one report file
# --------------------------

@router.get("/runs/{run_id}/reports/{name:path}")
def get_report(run_id: int, name: str, db: Session = Depends(get_db)):
    _run_or_404(db, run_id)
    report = db.query(ReportRecord).filter(ReportRecord.run_id == run_id, ReportRecord.name == name).first()
    if not report or not os.path.isfile(report.path):
        raise HTTPException(status_code=404, detail="Report not found")
    if report.path.endswith(".json"):
        try:
            return load_json(report.path)
        except RepmetricError as e:
            raise HTTPException(status_code=500, detail=f"Failed to read report: {str(e)}")
    return FileResponse(report.path, filename=os.path.basename(report.path))


# --------------------------
# Delete a run
# --------------------------

@router.delete("/runs/{run_id}")
def delete_run(run_id: int, db: Session = Depends(get_db)):
    record = _run_or_404(db, run_id)
    for report in _reports_of(db, run_id):
        db.delete(report)
    if record.output_dir and os.path.isdir(record.output_dir):
        shutil.rmtree(record.output_dir)
    db.delete(record)
    db.commit()
    return {"message": "Run deleted successfully", "run_id": run_id}
