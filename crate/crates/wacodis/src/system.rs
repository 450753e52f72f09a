//! Assembles the components into one running system.
//!
//! Startup order is broker, then subscribers, then producers, then the
//! scheduler, so no event can be published before its consumers listen.
//! An event-log subscriber on `wacodis.#` appends every message to
//! `events.jsonl`, which also guarantees each routing key has at least one
//! subscriber in a full assembly. The default deployment runs everything in
//! one process over the embedded broker; subsets can be selected for
//! multi-process setups, where the process runner is the natural component
//! to split out (other components exchange broker events and must stay
//! co-located with their peers).

use std::collections::HashSet;
use std::io::Write;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::Arc;

use axum::Router;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::broker::{topics, Broker};
use crate::client::{
    LocalProcessClient, LocalResolver, ProcessClient, ResourceResolver, RestProcessClient,
    RestResolver,
};
use crate::clock::Clock;
use crate::config::{ClockMode, ConfigError, ImporterConfig, SystemConfig};
use crate::engine::{CoreEngine, ExecutionStore};
use crate::jobs::{JobManager, JobStore};
use crate::listener::{FilesystemImporter, HttpImporter, ProductImporter, ProductListener};
use crate::model::{DataEnvelope, JobStatus};
use crate::observer::DatasourceObserver;
use crate::runner::tools::{ExternalCommandTool, ToolAdapter};
use crate::runner::ProcessRunner;
use crate::wrapper::EnvelopeIndex;

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("port in use: {0}")]
    PortInUse(String),
    #[error("bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
    #[error("{0}")]
    Component(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    JobManager,
    DatasourceObserver,
    DataWrapper,
    CoreEngine,
    ProcessRunner,
    ProductListener,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::JobManager,
        Component::DatasourceObserver,
        Component::DataWrapper,
        Component::CoreEngine,
        Component::ProcessRunner,
        Component::ProductListener,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::JobManager => "job-manager",
            Component::DatasourceObserver => "datasource-observer",
            Component::DataWrapper => "data-wrapper",
            Component::CoreEngine => "core-engine",
            Component::ProcessRunner => "process-runner",
            Component::ProductListener => "product-listener",
        }
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Component::ALL.iter().map(|c| c.name()).collect();
                format!("unknown component {s:?}; known: {}", known.join(", "))
            })
    }
}

/// Addresses actually bound by the REST servers (resolves port 0).
#[derive(Debug, Clone, Default)]
pub struct BoundAddresses {
    pub job_manager: Option<SocketAddr>,
    pub data_wrapper: Option<SocketAddr>,
    pub core_engine: Option<SocketAddr>,
    pub process_runner: Option<SocketAddr>,
    pub observer: Option<SocketAddr>,
}

/// A started system plus handles onto its components.
pub struct System {
    pub config: SystemConfig,
    pub clock: Clock,
    pub broker: Broker,
    pub jobs: Option<Arc<JobStore>>,
    pub manager: Option<Arc<JobManager>>,
    pub index: Option<Arc<EnvelopeIndex>>,
    pub observer: Option<Arc<DatasourceObserver>>,
    pub engine: Option<Arc<CoreEngine>>,
    pub runner: Option<Arc<ProcessRunner>>,
    pub listener: Option<Arc<ProductListener>>,
    pub bound: BoundAddresses,
    tasks: Vec<JoinHandle<()>>,
}

impl System {
    /// Clean shutdown: live executions are failed with reason "shutdown",
    /// loops stop, stores are already write-through, the broker closes.
    pub fn shutdown(&self) {
        if let Some(engine) = &self.engine {
            engine.shutdown("shutdown");
        }
        if let Some(observer) = &self.observer {
            observer.shutdown();
        }
        for task in &self.tasks {
            task.abort();
        }
        self.broker.stop();
    }
}

pub struct SystemBuilder {
    config: SystemConfig,
    components: HashSet<Component>,
    extra_tools: Vec<Arc<dyn ToolAdapter>>,
    extra_importers: Vec<Arc<dyn ProductImporter>>,
    bind_rest: bool,
}

impl SystemBuilder {
    pub fn new(config: SystemConfig) -> Self {
        SystemBuilder {
            config,
            components: Component::ALL.into_iter().collect(),
            extra_tools: Vec::new(),
            extra_importers: Vec::new(),
            bind_rest: true,
        }
    }

    pub fn components(mut self, components: impl IntoIterator<Item = Component>) -> Self {
        self.components = components.into_iter().collect();
        self
    }

    /// Adds a tool adapter at assembly time; it runs through the identical
    /// describe/execute/status/result flow as the built-ins.
    pub fn register_tool(mut self, tool: Arc<dyn ToolAdapter>) -> Self {
        self.extra_tools.push(tool);
        self
    }

    pub fn register_importer(mut self, importer: Arc<dyn ProductImporter>) -> Self {
        self.extra_importers.push(importer);
        self
    }

    /// Skip binding REST listeners (in-process embedding and tests).
    pub fn without_rest(mut self) -> Self {
        self.bind_rest = false;
        self
    }

    pub async fn start(self) -> Result<System, SystemError> {
        let SystemBuilder {
            config,
            components,
            extra_tools,
            extra_importers,
            bind_rest,
        } = self;
        let enabled = |c: Component| components.contains(&c);

        config.validate(enabled(Component::ProductListener))?;
        if enabled(Component::CoreEngine) && !enabled(Component::JobManager) {
            return Err(SystemError::Component(
                "core-engine requires job-manager in the same process (shared job store)".into(),
            ));
        }

        let clock = match config.clock.mode {
            ClockMode::Real => Clock::real(),
            ClockMode::Simulated => {
                Clock::simulated(config.clock.start.expect("validated simulated start"))
            }
        };
        let broker = Broker::new(
            clock.clone(),
            config.broker.buffer_size,
            config.broker.duplicate_delivery,
        );
        let mut tasks: Vec<JoinHandle<()>> = Vec::new();
        let mut bound = BoundAddresses::default();

        // Event log: first subscriber, catches everything.
        {
            let mut sub = broker
                .subscribe("wacodis.#", "event-log")
                .expect("fresh broker accepts subscriptions");
            let path = config.event_log();
            tasks.push(tokio::spawn(async move {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path);
                let Ok(mut file) = file else {
                    tracing::error!(path = %path.display(), "event log unavailable");
                    return;
                };
                while let Some(msg) = sub.recv().await {
                    let line = serde_json::json!({
                        "messageId": msg.message_id,
                        "routingKey": msg.routing_key.as_str(),
                        "timestamp": crate::model::format_ts(msg.timestamp),
                        "payload": msg.payload,
                    });
                    let _ = writeln!(file, "{line}");
                }
            }));
        }

        // Stores and stateful services, before any producer runs.
        let jobs = if enabled(Component::JobManager) {
            Some(Arc::new(
                JobStore::open(config.jobs_dir()).map_err(|e| SystemError::Component(e.to_string()))?,
            ))
        } else {
            None
        };

        let index = if enabled(Component::DataWrapper) {
            Some(
                EnvelopeIndex::open(config.envelope_ledger())
                    .map_err(|e| SystemError::Component(e.to_string()))?,
            )
        } else {
            None
        };

        let runner = if enabled(Component::ProcessRunner) {
            let runner = ProcessRunner::new(
                config.runner_work_dir(),
                config.runner_results_dir(),
                config.runner.parallelism,
                clock.clone(),
            )
            .map_err(|e| SystemError::Component(e.to_string()))?;
            runner
                .register_builtin_tools()
                .map_err(|e| SystemError::Component(e.to_string()))?;
            for tool_config in &config.runner.external_tools {
                runner
                    .register(Arc::new(ExternalCommandTool {
                        description: tool_config.description(),
                        command: tool_config.command.clone(),
                        args: tool_config.args.clone(),
                        outputs: tool_config.outputs.clone(),
                    }))
                    .map_err(|e| SystemError::Component(e.to_string()))?;
            }
            for tool in extra_tools {
                runner
                    .register(tool)
                    .map_err(|e| SystemError::Component(e.to_string()))?;
            }
            Some(runner)
        } else {
            None
        };

        // Client wiring: local handles when co-located, REST otherwise.
        let process_client: Arc<dyn ProcessClient> = match &runner {
            Some(runner) => Arc::new(LocalProcessClient(Arc::clone(runner))),
            None => Arc::new(RestProcessClient::new(format!(
                "http://{}",
                config.services.process_runner
            ))),
        };
        let resolver: Arc<dyn ResourceResolver> = match &index {
            Some(index) => Arc::new(LocalResolver(Arc::clone(index))),
            None => Arc::new(RestResolver::new(format!(
                "http://{}",
                config.services.data_wrapper
            ))),
        };

        // Subscriber: wrapper indexes announced envelopes.
        if let Some(index) = &index {
            let mut sub = broker
                .subscribe(topics::DATA_AVAILABLE, "data-wrapper")
                .expect("fresh broker accepts subscriptions");
            let index = Arc::clone(index);
            tasks.push(tokio::spawn(async move {
                while let Some(msg) = sub.recv().await {
                    match serde_json::from_value::<DataEnvelope>(msg.payload) {
                        Ok(envelope) => {
                            if let Err(e) = index.insert(envelope) {
                                tracing::warn!(error = %e, "envelope rejected");
                            }
                        }
                        Err(e) => tracing::warn!(error = %e, "malformed data.available payload"),
                    }
                }
            }));
        }

        // Subscriber: product listener ingests announced products.
        let listener = if enabled(Component::ProductListener) {
            let mut importers: Vec<Arc<dyn ProductImporter>> = Vec::new();
            for importer_config in &config.importers {
                match importer_config {
                    ImporterConfig::Filesystem { root } => {
                        let root = root.clone().unwrap_or_else(|| config.default_product_root());
                        importers.push(Arc::new(FilesystemImporter::new(root)));
                    }
                    ImporterConfig::Http { endpoint } => {
                        importers.push(Arc::new(HttpImporter::new(endpoint.clone())));
                    }
                }
            }
            importers.extend(extra_importers);
            let listener = ProductListener::new(
                importers,
                Arc::clone(&process_client),
                broker.clone(),
                clock.clone(),
                config.listener_ledger(),
            )
            .map_err(|e| SystemError::Component(e.to_string()))?;

            let mut sub = broker
                .subscribe(topics::PRODUCTS_NEW, "product-listener")
                .expect("fresh broker accepts subscriptions");
            let listener_task = Arc::clone(&listener);
            tasks.push(tokio::spawn(async move {
                while let Some(msg) = sub.recv().await {
                    if let Err(e) = listener_task.on_new_product(&msg.payload).await {
                        tracing::error!(error = %e, "product ingestion failed");
                    }
                }
            }));
            Some(listener)
        } else {
            None
        };

        // Engine: open records, reconcile jobs interrupted by a crash, then
        // subscribe to job churn before the manager can produce it.
        let engine = if enabled(Component::CoreEngine) {
            let jobs = jobs.as_ref().expect("validated job-manager presence");
            let (records, interrupted) =
                ExecutionStore::open(config.executions_dir(), "interrupted")
                    .map_err(|e| SystemError::Component(e.to_string()))?;
            for record in &interrupted {
                tracing::warn!(execution = %record.execution_id, "execution interrupted by previous shutdown");
            }
            for job in jobs.list() {
                if job.status == JobStatus::Running {
                    let mut job = job;
                    job.status = JobStatus::Failed;
                    jobs.update(job)
                        .map_err(|e| SystemError::Component(e.to_string()))?;
                }
            }

            let engine = CoreEngine::new(
                Arc::clone(jobs),
                records,
                resolver,
                Arc::clone(&process_client),
                broker.clone(),
                clock.clone(),
                config.retry,
                config.engine.required_processing_levels.clone(),
                std::time::Duration::from_secs(config.engine.execution_timeout_seconds),
            );

            let mut sub = broker
                .subscribe("wacodis.jobs.*", "core-engine")
                .expect("fresh broker accepts subscriptions");
            let engine_task = Arc::clone(&engine);
            tasks.push(tokio::spawn(async move {
                while let Some(_msg) = sub.recv().await {
                    engine_task.wake();
                }
            }));
            Some(engine)
        } else {
            None
        };

        // Producers.
        let manager = match &jobs {
            Some(jobs) => Some(Arc::new(JobManager::new(
                Arc::clone(jobs),
                broker.clone(),
                clock.clone(),
            ))),
            None => None,
        };

        let observer = if enabled(Component::DatasourceObserver) {
            let observer =
                DatasourceObserver::new(broker.clone(), clock.clone(), config.observer_ledger())
                    .map_err(|e| SystemError::Component(e.to_string()))?;
            for source in &config.catalogs {
                observer
                    .register_source(source.clone())
                    .map_err(|e| SystemError::Component(e.to_string()))?;
            }
            Some(observer)
        } else {
            None
        };

        // REST servers.
        if bind_rest {
            if let Some(manager) = &manager {
                bound.job_manager = Some(
                    serve_router(
                        &config.services.job_manager,
                        crate::jobs::router(Arc::clone(manager)),
                        &mut tasks,
                    )
                    .await?,
                );
            }
            if let Some(index) = &index {
                bound.data_wrapper = Some(
                    serve_router(
                        &config.services.data_wrapper,
                        crate::wrapper::router(Arc::clone(index)),
                        &mut tasks,
                    )
                    .await?,
                );
            }
            if let Some(engine) = &engine {
                bound.core_engine = Some(
                    serve_router(
                        &config.services.core_engine,
                        crate::engine::router(Arc::clone(engine)),
                        &mut tasks,
                    )
                    .await?,
                );
            }
            if let Some(runner) = &runner {
                let addr = serve_router(
                    &config.services.process_runner,
                    crate::runner::router(Arc::clone(runner)),
                    &mut tasks,
                )
                .await?;
                runner.set_base_url(format!("http://{addr}"));
                bound.process_runner = Some(addr);
            }
            if let Some(observer) = &observer {
                bound.observer = Some(
                    serve_router(
                        &config.services.observer,
                        crate::observer::router(Arc::clone(observer)),
                        &mut tasks,
                    )
                    .await?,
                );
            }
        }

        // Scheduler last: everything else is listening by now.
        if let Some(engine) = &engine {
            let scheduler = Arc::clone(engine);
            tasks.push(tokio::spawn(scheduler.run_scheduler()));
        }

        // Readiness: in a full assembly every routing key must have a
        // subscriber before producers can publish.
        let full = Component::ALL.iter().all(|c| components.contains(c));
        for key in topics::ALL {
            let subscribers = broker.matching_subscribers(key);
            if subscribers == 0 {
                let message = format!("routing key {key} has no subscriber");
                if full {
                    return Err(SystemError::Component(message));
                }
                tracing::warn!("{message} (partial assembly)");
            }
        }

        Ok(System {
            config,
            clock,
            broker,
            jobs,
            manager,
            index,
            observer,
            engine,
            runner,
            listener,
            bound,
            tasks,
        })
    }
}

async fn serve_router(
    addr: &str,
    router: Router,
    tasks: &mut Vec<JoinHandle<()>>,
) -> Result<SocketAddr, SystemError> {
    let listener = TcpListener::bind(addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            SystemError::PortInUse(addr.to_string())
        } else {
            SystemError::Bind {
                addr: addr.to_string(),
                reason: e.to_string(),
            }
        }
    })?;
    let bound = listener.local_addr().map_err(|e| SystemError::Bind {
        addr: addr.to_string(),
        reason: e.to_string(),
    })?;
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            tracing::error!(error = %e, "http server stopped");
        }
    }));
    Ok(bound)
}

/// Runs the system until SIGTERM/ctrl-c, printing a readiness line per bound
/// service so operators and scripts can locate the endpoints.
pub async fn serve(
    config: SystemConfig,
    components: Option<Vec<Component>>,
) -> Result<(), SystemError> {
    let mut builder = SystemBuilder::new(config);
    if let Some(list) = components {
        builder = builder.components(list);
    }
    let system = builder.start().await?;

    let lines = [
        (Component::JobManager.name(), system.bound.job_manager),
        (Component::DataWrapper.name(), system.bound.data_wrapper),
        (Component::CoreEngine.name(), system.bound.core_engine),
        (Component::ProcessRunner.name(), system.bound.process_runner),
        (Component::DatasourceObserver.name(), system.bound.observer),
    ];
    for (name, addr) in lines {
        if let Some(addr) = addr {
            println!("[ready] {name} http://{addr}");
        }
    }
    println!("[ready] system started");

    wait_for_signal().await;
    tracing::info!("signal received, shutting down");
    system.shutdown();
    Ok(())
}

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}
