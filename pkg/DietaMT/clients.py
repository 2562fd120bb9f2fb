# - Clients of the external services the pipeline talks to: the
#   translation judge, the machine-translation endpoint used for
#   back-translation and the neural metric scorer.
# - StubProvider implements the three contracts in-process for offline runs.

import json
import logging
import os
import threading
import urllib.error
import urllib.request
from typing import Callable, Dict, List, Optional, Sequence

from .support_functions import ClientError, ConfigError

logger = logging.getLogger(__name__)

JUDGE_URL_ENV = "DIETA_JUDGE_URL"
MT_URL_ENV = "DIETA_MT_URL"
SCORER_URL_ENV = "DIETA_SCORER_URL"

DIRECTIONS = ("en-it", "it-en")

DEFAULT_TIMEOUT = 30.0


class HTTPJsonClient:
    """
    POST a JSON object to ``url`` and return the decoded JSON reply.

    Every transport failure, non-2xx status or unparseable body is raised
    as :class:`ClientError`.
    """

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT):
        if not url:
            raise ConfigError(f"{type(self).__name__} needs an endpoint URL")
        self.url = url
        self.timeout = timeout

    def __repr__(self):
        return f"{type(self).__name__}({self.url!r})"

    def post(self, payload: Dict[str, object]) -> Dict[str, object]:
        body = json.dumps(payload).encode("utf-8")
        request = urllib.request.Request(
            self.url,
            data=body,
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                raw = response.read()
        except urllib.error.HTTPError as err:
            raise ClientError(f"{self.url}: HTTP {err.code}") from None
        except (urllib.error.URLError, TimeoutError, OSError) as err:
            raise ClientError(f"{self.url}: {err}") from None
        try:
            reply = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise ClientError(f"{self.url}: malformed JSON reply ({err})") from None
        if not isinstance(reply, dict):
            raise ClientError(
                f"{self.url}: expected a JSON object, got {type(reply).__name__}"
            )
        return reply

    def field(self, reply: Dict[str, object], key: str, kind: type):
        value = reply.get(key)
        if not isinstance(value, kind):
            raise ClientError(
                f"{self.url}: reply lacks a {kind.__name__} field {key!r}"
            )
        return value


class HTTPJudgeClient(HTTPJsonClient):
    """``{"prompt": str} -> {"reply": str}``"""

    def judge(self, prompt: str) -> str:
        return self.field(self.post({"prompt": prompt}), "reply", str)


class HTTPTranslationClient(HTTPJsonClient):
    """``{"text": str, "direction": "en-it"|"it-en"} -> {"translation": str}``"""

    def translate(self, text: str, direction: str) -> str:
        if direction not in DIRECTIONS:
            raise ConfigError(
                f"direction must be one of {DIRECTIONS}, got {direction!r}"
            )
        reply = self.post({"text": text, "direction": direction})
        return self.field(reply, "translation", str)


class HTTPScorerClient(HTTPJsonClient):
    """
    ``{"src": [...], "hyp": [...], "ref": [...]} -> {"scores": [...]}``

    Parameters
    ----------
    url : str
    name : str
        Metric name recorded in reports (e.g. 'comet', 'metricx').
    reference_based : bool
        Whether the metric needs references; quality-estimation metrics
        (qe-metricx, cometkiwi) do not.
    """

    def __init__(
        self,
        url: str,
        name: str,
        reference_based: bool = True,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        super().__init__(url, timeout)
        self.name = name
        self.reference_based = reference_based

    def score(
        self,
        sources: Sequence[str],
        hypotheses: Sequence[str],
        references: Optional[Sequence[str]] = None,
    ) -> List[float]:
        payload: Dict[str, object] = {"src": list(sources), "hyp": list(hypotheses)}
        if references is not None:
            payload["ref"] = list(references)
        scores = self.field(self.post(payload), "scores", list)
        try:
            return [float(s) for s in scores]
        except (TypeError, ValueError):
            raise ClientError(f"{self.url}: non-numeric segment score") from None


class StubProvider:
    """
    In-process stand-in for the judge, translation and scorer endpoints.

    Parameters
    ----------
    judge_fn : callable, optional
        ``prompt -> reply``; replies 'yes' when omitted.
    mt_fn : callable, optional
        ``(text, direction) -> translation``; identity when omitted.
    scorer_fn : callable, optional
        ``(sources, hypotheses, references) -> scores``; 0.5 per segment when
        omitted.
    name : str, optional
        Metric name reported by :meth:`score`.
    reference_based : bool, optional

    Notes
    -----
    A callable may raise :class:`ClientError` to emulate an endpoint fault.
    Calls are counted per contract (``calls['judge']`` ...).
    """

    def __init__(
        self,
        judge_fn: Optional[Callable[[str], str]] = None,
        mt_fn: Optional[Callable[[str, str], str]] = None,
        scorer_fn: Optional[Callable[..., Sequence[float]]] = None,
        name: str = "stub",
        reference_based: bool = True,
    ):
        self.judge_fn = judge_fn or (lambda prompt: "yes")
        self.mt_fn = mt_fn or (lambda text, direction: text)
        self.scorer_fn = scorer_fn or (lambda src, hyp, ref: [0.5] * len(hyp))
        self.name = name
        self.reference_based = reference_based
        self.calls = {"judge": 0, "translate": 0, "score": 0}
        self._lock = threading.Lock()

    def _count(self, what: str):
        with self._lock:
            self.calls[what] += 1

    def judge(self, prompt: str) -> str:
        self._count("judge")
        return self.judge_fn(prompt)

    def translate(self, text: str, direction: str) -> str:
        self._count("translate")
        return self.mt_fn(text, direction)

    def score(self, sources, hypotheses, references=None) -> List[float]:
        self._count("score")
        return [float(s) for s in self.scorer_fn(sources, hypotheses, references)]


def endpoint_url(explicit: Optional[str], env_var: str) -> Optional[str]:
    """Flag value if given, otherwise the environment variable (or None)."""
    if explicit:
        return explicit
    return os.environ.get(env_var) or None


def judge_client(
    url: Optional[str] = None, timeout: float = DEFAULT_TIMEOUT
) -> HTTPJudgeClient:
    resolved = endpoint_url(url, JUDGE_URL_ENV)
    if resolved is None:
        raise ConfigError(f"no judge endpoint: pass --judge-url or set {JUDGE_URL_ENV}")
    return HTTPJudgeClient(resolved, timeout)


def translation_client(
    url: Optional[str] = None, timeout: float = DEFAULT_TIMEOUT
) -> HTTPTranslationClient:
    resolved = endpoint_url(url, MT_URL_ENV)
    if resolved is None:
        raise ConfigError(f"no translation endpoint: pass --mt-url or set {MT_URL_ENV}")
    return HTTPTranslationClient(resolved, timeout)


def scorer_client(
    name: str,
    url: Optional[str] = None,
    reference_based: bool = True,
    timeout: float = DEFAULT_TIMEOUT,
) -> HTTPScorerClient:
    resolved = endpoint_url(url, SCORER_URL_ENV)
    if resolved is None:
        raise ConfigError(
            f"no scorer endpoint: pass --scorer-url or set {SCORER_URL_ENV}"
        )
    return HTTPScorerClient(resolved, name, reference_based, timeout)
