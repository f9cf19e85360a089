"""FastAPI app exposing a loaded model over the engine wire protocol.

Endpoints: GET /v1/health, GET /v1/vocab, POST /v1/distribution,
POST /v1/tokenize. The server only reports distributions; all decoding
decisions live in the engine. Error bodies are {"error": str}.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .backend import BackendError, ModelBackend


class DistributionRequest(BaseModel):
    context_text: str | None = None
    context_tokens: list[str] | None = None
    top_k: int | None = None


class TokenizeRequest(BaseModel):
    text: str


def create_app(backend: ModelBackend | None) -> FastAPI:
    """Build the service; a None backend answers 503 until one is attached."""
    app = FastAPI(title="cds-model-shim")
    app.state.backend = backend

    def _backend() -> ModelBackend:
        if app.state.backend is None:
            raise _Loading()
        return app.state.backend

    class _Loading(Exception):
        pass

    @app.exception_handler(_Loading)
    async def _loading_handler(request: Request, exc: _Loading):
        return JSONResponse(status_code=503, content={"status": "loading", "error": "model is loading"})

    @app.exception_handler(BackendError)
    async def _bad_request_handler(request: Request, exc: BackendError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(Exception)
    async def _server_error_handler(request: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"error": f"{type(exc).__name__}: {exc}"})

    @app.get("/v1/health")
    def health():
        backend = _backend()
        return {"status": "ok", "model": backend.spec.model}

    @app.get("/v1/vocab")
    def vocab():
        return _backend().vocab_document()

    @app.post("/v1/distribution")
    def distribution(request: DistributionRequest):
        return _backend().distribution(
            context_text=request.context_text,
            context_tokens=request.context_tokens,
            top_k=request.top_k,
        )

    @app.post("/v1/tokenize")
    def tokenize(request: TokenizeRequest):
        return {"tokens": _backend().tokenize(request.text)}

    return app
