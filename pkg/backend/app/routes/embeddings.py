import logging
import os
import shutil
from datetime import datetime
from typing import Optional

from fastapi import APIRouter, Depends, File, Form, HTTPException, UploadFile
from sqlalchemy.orm import Session

from ..config import get_settings
from ..database import get_db
from ..errors import RepmetricError
from ..models import EmbeddingRecord
from ..services.embedding_store import FORMATS, load_embeddings

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api", tags=["embeddings"])


def _save_upload(upload: UploadFile, directory: str) -> str:
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
    path = os.path.join(directory, f"{timestamp}_{os.path.basename(upload.filename)}")
    with open(path, "wb") as buffer:
        shutil.copyfileobj(upload.file, buffer)
    return path


def _record_or_404(db: Session, embedding_id: int) -> EmbeddingRecord:
    record = db.query(EmbeddingRecord).filter(EmbeddingRecord.id == embedding_id).first()
    if not record:
        raise HTTPException(status_code=404, detail="Embedding set not found")
    return record


def _describe(record: EmbeddingRecord) -> dict:
    return {
        "id": record.id,
        "tag": record.tag,
        "filename": record.filename,
        "file_path": record.file_path,
        "ids_path": record.ids_path,
        "format": record.format,
        "rows": record.rows,
        "dims": record.dims,
        "uploaded_at": record.uploaded_at.isoformat(),
    }


# ---------------------------
# Upload endpoint
# ---------------------------
@router.post("/embeddings")
async def upload_embeddings(
    file: UploadFile = File(...),
    tag: Optional[str] = Form(None),
    format: str = Form("npy"),
    header: bool = Form(False),
    ids: Optional[UploadFile] = File(None),
    db: Session = Depends(get_db)
):
    """
    Upload an embedding matrix (npy or csv) and an optional sample-id sidecar
    """
    if format not in FORMATS:
        raise HTTPException(status_code=400, detail=f"Unsupported format '{format}', expected one of {FORMATS}")
    if format == "rawf32":
        raise HTTPException(status_code=400, detail="rawf32 needs a shape sidecar; upload npy or csv instead")

    upload_dir = get_settings().upload_dir
    os.makedirs(upload_dir, exist_ok=True)
    try:
        file_path = _save_upload(file, upload_dir)
        ids_path = _save_upload(ids, upload_dir) if ids is not None and ids.filename else None
    except OSError as e:
        raise HTTPException(status_code=500, detail=f"Failed to save file: {str(e)}")

    tag = tag or os.path.splitext(os.path.basename(file.filename))[0]
    try:
        embeddings = load_embeddings(file_path, format, tag, ids_path=ids_path, header=header)
        summary = embeddings.summary()
    except RepmetricError as e:
        for path in (file_path, ids_path):
            if path and os.path.exists(path):
                os.remove(path)
        raise HTTPException(status_code=400, detail=f"Failed to ingest file: {str(e)}")

    record = EmbeddingRecord(
        tag=tag,
        filename=file.filename,
        file_path=file_path,
        ids_path=ids_path,
        format=format,
        rows=summary["rows"],
        dims=summary["dims"],
        summary={**summary, "header": header},
    )
    db.add(record)
    db.commit()
    db.refresh(record)
    logger.info("Stored embedding set '%s' (%d x %d) as #%d", tag, record.rows, record.dims, record.id)

    return {
        "message": "Embeddings uploaded successfully",
        "embedding_id": record.id,
        "tag": tag,
        "summary": summary,
    }


# ---------------------------
# List embedding sets
# ---------------------------
@router.get("/embeddings")
def get_embeddings(db: Session = Depends(get_db)):
    records = db.query(EmbeddingRecord).all()
    return {"count": len(records), "embeddings": [_describe(r) for r in records]}


# ---------------------------
# Embedding set details
# ---------------------------
@router.get("/embeddings/{embedding_id}")
def get_embedding(embedding_id: int, db: Session = Depends(get_db)):
    return _describe(_record_or_404(db, embedding_id))


# ---------------------------
# Ingest summary with per-dimension statistics
# ---------------------------
@router.get("/embeddings/{embedding_id}/summary")
def get_embedding_summary(embedding_id: int, db: Session = Depends(get_db)):
    record = _record_or_404(db, embedding_id)
    try:
        embeddings = load_embeddings(record.file_path, record.format, record.tag, ids_path=record.ids_path,
                                     header=bool(record.summary and record.summary.get("header")))
        stats = embeddings.dimension_statistics()
    except (RepmetricError, OSError) as e:
        raise HTTPException(status_code=500, detail=f"Failed to summarize embeddings: {str(e)}")

    return {
        "id": record.id,
        "summary": embeddings.summary(),
        "dimensions": {
            "mean": stats["mean"].tolist(),
            "std": stats["std"].fillna(0.0).tolist(),
        },
    }
