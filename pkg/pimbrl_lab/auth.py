"""API-key check for the run service."""

import hmac
import os
from typing import Optional

from fastapi import HTTPException, Security
from fastapi.security import APIKeyHeader

API_KEY_HEADER_NAME = "X-PiMBRL-API-Key"
api_key_header = APIKeyHeader(name=API_KEY_HEADER_NAME, auto_error=False)


def verify_api_key(api_key: Optional[str] = Security(api_key_header)) -> str:
    """
    FastAPI dependency comparing the request header with PIMBRL_API_KEY.

    Access is open while the variable is unset.

    Raises:
        HTTPException: 401 on a missing or wrong key
    """
    expected = os.getenv("PIMBRL_API_KEY")
    if expected is None:
        return "open"
    if api_key is None:
        raise HTTPException(
            status_code=401, detail=f"Missing API key; send the '{API_KEY_HEADER_NAME}' header."
        )
    if not hmac.compare_digest(api_key.encode(), expected.encode()):
        raise HTTPException(status_code=401, detail="Invalid API key.")
    return api_key
