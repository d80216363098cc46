import logging

from fastapi import FastAPI

from . import __version__
from .config import configure_logging
from .database import init_db
from .routes import embeddings, runs

logger = logging.getLogger(__name__)

app = FastAPI(title="repmetric run registry", version=__version__)

# Include routers
app.include_router(embeddings.router)
app.include_router(runs.router)


# Initialize database
@app.on_event("startup")
def startup_event():
    configure_logging()
    init_db()
    logger.info("Database initialized")


@app.get("/")
def read_root():
    return {"message": "repmetric API is running"}


@app.get("/api/health")
def health_check():
    return {"status": "healthy", "version": __version__}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
