"""HTTP client for chat-completion endpoints."""
from __future__ import annotations

import logging
import threading
import time
from typing import Any, Dict, Optional

import requests
from django.conf import settings

logger = logging.getLogger(__name__)


class MissingChatConfiguration(RuntimeError):
    """Raised when the chat endpoint or its token is not configured."""


class ChatTransportError(RuntimeError):
    def __init__(self, message: str, *, status_code: int, response_data: Any | None = None) -> None:
        super().__init__(message)
        self.status_code = status_code
        self.response_data = response_data


class ChatClient:
    """Sends one user message per call and returns the first choice's text.

    Failed requests are retried with exponential backoff; the number of
    requests in flight across threads is capped.
    """

    def __init__(
        self,
        *,
        api_key: Optional[str] = None,
        base_url: Optional[str] = None,
        model: Optional[str] = None,
        timeout: Optional[float] = None,
        max_attempts: Optional[int] = None,
        backoff: Optional[float] = None,
        max_in_flight: Optional[int] = None,
    ) -> None:
        self.api_key = api_key or getattr(settings, 'CHAT_API_KEY', '')
        if not self.api_key:
            raise MissingChatConfiguration('Set CHAT_API_KEY before using the chat backend.')
        self.base_url = (base_url or getattr(settings, 'CHAT_API_BASE', '')).rstrip('/')
        if not self.base_url:
            raise MissingChatConfiguration('Set CHAT_API_BASE before using the chat backend.')
        self.model = model or getattr(settings, 'CHAT_MODEL', 'gpt-4o')
        self.timeout = timeout or getattr(settings, 'CHAT_TIMEOUT_SECONDS', 60)
        self.max_attempts = max(1, max_attempts or getattr(settings, 'CHAT_MAX_ATTEMPTS', 2))
        self.backoff = backoff if backoff is not None else getattr(settings, 'CHAT_BACKOFF_SECONDS', 1.0)
        self.session = requests.Session()
        self._slots = threading.BoundedSemaphore(max_in_flight or getattr(settings, 'CHAT_MAX_IN_FLIGHT', 4))

    def _post(self, payload: Dict[str, Any]) -> str:
        headers = {
            'Accept': 'application/json',
            'Content-Type': 'application/json',
            'Authorization': f'Bearer {self.api_key}',
        }
        try:
            response = self.session.post(
                f'{self.base_url}/chat/completions',
                json=payload,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise ChatTransportError(f'Chat endpoint unreachable: {exc}', status_code=0) from exc
        if response.status_code >= 400:
            try:
                data = response.json()
            except ValueError:
                data = {'raw': response.text}
            raise ChatTransportError(
                f'Chat endpoint returned HTTP {response.status_code}.',
                status_code=response.status_code,
                response_data=data,
            )
        try:
            return str(response.json()['choices'][0]['message']['content'])
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ChatTransportError('Malformed chat completion response.', status_code=response.status_code) from exc

    def complete(self, prompt: str) -> str:
        payload = {
            'model': self.model,
            'messages': [{'role': 'user', 'content': prompt}],
            'temperature': 0,
        }
        last_error: Optional[ChatTransportError] = None
        with self._slots:
            for attempt in range(self.max_attempts):
                try:
                    return self._post(payload)
                except ChatTransportError as exc:
                    last_error = exc
                    logger.warning('Chat request failed (attempt %d/%d): %s', attempt + 1, self.max_attempts, exc)
                    if attempt < self.max_attempts - 1:
                        time.sleep(self.backoff * (2 ** attempt))
        assert last_error is not None
        raise ChatTransportError(
            f'Chat completion failed after {self.max_attempts} attempts: {last_error}',
            status_code=last_error.status_code,
            response_data=last_error.response_data,
        ) from last_error
