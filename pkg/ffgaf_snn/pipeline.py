"""
A small scheduler for experiment stages.

Stages are plain functions. A stage parameter named after another registered stage receives that stage's return
value, so the stage runs only after it. Every other parameter is supplied when the pipeline is called. Stages run in a
thread pool as soon as all their dependencies are done.
"""
from __future__ import annotations

import logging
from asyncio import FIRST_COMPLETED, CancelledError, Future, get_running_loop, wait
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from functools import partial, update_wrapper
from inspect import Parameter, signature
from typing import Any, Callable, Dict, Generic, Iterable, Mapping, Optional, Set, TypeVar

from ffgaf_snn.config import worker_count
from ffgaf_snn.exceptions import CycleError

__all__ = ['Pipeline', 'StageTemplate', 'PipelineResult']

logger = logging.getLogger(__name__)

param_kind_ignore = frozenset((
    Parameter.POSITIONAL_ONLY, Parameter.VAR_POSITIONAL, Parameter.VAR_KEYWORD
))

T = TypeVar('T')
K = TypeVar('K')
V = TypeVar('V')


def filter_dict(origin: Mapping[K, V], keys: Iterable[K]) -> Dict[K, V]:
    return {k: origin[k] for k in keys}


class StageTemplate(Generic[T]):
    """
    A stage of a pipeline
    """

    def __init__(self, name: str, callback: Callable[..., T], dependencies: Set[StageTemplate],
                 accepted: Set[str]):
        """
        :param name: the name of the stage
        :param callback: the function to call when running the stage
        :param dependencies: stages that must be completed before this stage is started
        :param accepted: the names of all keyword parameters of the callback
        """
        self.name = name
        self.callback = callback
        self.dependencies = dependencies
        self.accepted = accepted
        update_wrapper(self, callback)

    def __call__(self, *args, **kwargs) -> T:
        """
        call the base callable of the stage
        """
        return self.callback(*args, **kwargs)

    def __repr__(self):
        return f'StageTemplate({self.name})'


class PipelineResult(Mapping[StageTemplate, Any]):
    def __init__(self, results: Mapping[StageTemplate, Any]):
        self.results = results

    def __getitem__(self, item):
        return self.results[item]

    def __iter__(self):
        return iter(self.results)

    def __len__(self):
        return len(self.results)

    def kwargs(self) -> Dict[str, Any]:
        """
        :return: A dict of the results by stage name rather than by stage
        """
        return {st.name: v for (st, v) in self.results.items()}


class Pipeline:
    """
    A collection of stages.
    """

    def __init__(self, max_workers: Optional[int] = None):
        """
        :param max_workers: the size of the thread pool stages run in, defaults to :func:`worker_count`
        """
        self._kwarg_users: Dict[str, Set[StageTemplate]] = defaultdict(set)
        # maps parameter names to stages that use them, so stages registered later become dependencies
        self._templates: Dict[str, StageTemplate] = {}
        self.max_workers = max_workers

    def register(self, func: Callable[..., T]) -> StageTemplate[T]:
        """
        Create a new stage and register it to the pipeline.
        :param func: the function to wrap in a StageTemplate
        :return: The stage.

        .. note::
            This method can be used as a decorator.
        """
        name = func.__name__
        if name in self._templates:
            raise ValueError(f'duplicate stage name {name}')

        kwargs = set()
        dependencies = set()
        accepted = set()
        for param in signature(func).parameters.values():
            if param.kind in param_kind_ignore:
                continue
            accepted.add(param.name)
            parent = self._templates.get(param.name)
            if parent:
                dependencies.add(parent)
            else:
                kwargs.add(param.name)

        template = StageTemplate(name, func, dependencies, accepted)
        self._templates[name] = template
        for kw in kwargs:
            self._kwarg_users[kw].add(template)

        # any previous stage that uses the current stage as a keyword will now use it as a dependency
        for dependant in self._kwarg_users.pop(name, ()):
            dependant.dependencies.add(template)
        return template

    async def __call__(self, **kwargs) -> PipelineResult:
        """
        Run all the stages in topological order.
        :param kwargs: forwarded to every stage that accepts them
        :return: a mapping of every stage to its return value
        :raises CycleError: if stages depend on each other in a cycle
        """
        bad_keys = kwargs.keys() & self._templates.keys()
        if bad_keys:
            raise TypeError(f'cannot accept keyword arguments of stage names {sorted(bad_keys)}')

        loop = get_running_loop()
        results: Dict[StageTemplate, Any] = {}
        intermediary: Dict[str, Any] = {}
        # the same results, by stage name
        futures: Dict[Future, StageTemplate] = {}
        pending: Set[Future] = set()
        not_ready: Dict[StageTemplate, Set[StageTemplate]] = {}
        dependants: Dict[StageTemplate, Set[StageTemplate]] = defaultdict(set)
        delayed_exception: Optional[BaseException] = None

        with ThreadPoolExecutor(max_workers=self.max_workers or worker_count()) as executor:
            def start(st: StageTemplate):
                kw = {**filter_dict(intermediary, (d.name for d in st.dependencies)),
                      **filter_dict(kwargs, kwargs.keys() & st.accepted)}
                logger.info('starting stage %s', st.name)
                future = loop.run_in_executor(executor, partial(st, **kw))
                futures[future] = st
                pending.add(future)

            for st in self._templates.values():
                for dependency in st.dependencies:
                    dependants[dependency].add(st)
                if not st.dependencies:
                    start(st)
                else:
                    not_ready[st] = set(st.dependencies)

            while True:
                if not pending:
                    if not_ready and delayed_exception is None:
                        raise CycleError(f'cyclic dependency between multiple stages: {list(not_ready)}')
                    break

                try:
                    done_futures, pending = await wait(pending, return_when=FIRST_COMPLETED)
                except CancelledError:
                    for future in pending:
                        future.cancel()
                    raise

                for done in done_futures:
                    st = futures[done]
                    exc = done.exception()
                    if exc is not None:
                        logger.error('stage %s failed: %r', st.name, exc)
                        if delayed_exception is None:
                            delayed_exception = exc
                        # stages that have not started are discarded, running ones finish
                        not_ready.clear()
                        continue
                    logger.info('finished stage %s', st.name)
                    results[st] = intermediary[st.name] = done.result()

                    for dependant in dependants[st]:
                        if dependant not in not_ready:
                            continue
                        not_ready[dependant].remove(st)
                        if not not_ready[dependant]:
                            del not_ready[dependant]
                            start(dependant)

        if delayed_exception is not None:
            raise delayed_exception
        return PipelineResult(results)
