//! Starting index and hospital servers from a topology, either all in one
//! process or one component per process.

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use ehrfed_core::audit::{AuditLog, Durability};
use ehrfed_core::auth::{AuthService, CredentialTable, Gate, KeyRing};
use ehrfed_core::deid::FederationKey;
use ehrfed_core::index::{IndexService, PatientIndex};
use ehrfed_core::legacy::{FieldMapping, LegacyStore, MappingRegistry};
use ehrfed_core::node::{FanoutConfig, HospitalNode, RecordStore, SyncAgent};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::client::{http_client, IndexClient, PeerClient};
use crate::config::{ConfigError, NodeConfig, Topology};
use crate::index_http::{self, INDEX_SERVER_ID};
use crate::node_http::{self, NodeState};

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{what}: {message}")]
    Setup { what: String, message: String },
    #[error("unknown hospital {0}")]
    UnknownHospital(String),
}

fn setup(what: impl std::fmt::Display) -> impl FnOnce(&dyn std::fmt::Display) -> LaunchError {
    let what = what.to_string();
    move |e| LaunchError::Setup {
        what,
        message: e.to_string(),
    }
}

macro_rules! ctx {
    ($r:expr, $what:expr) => {
        $r.map_err(|e| setup($what)(&e))
    };
}

#[derive(Debug, Clone)]
pub struct LaunchOptions {
    /// Run each node's sync agent on its configured interval.
    pub periodic_sync: bool,
    pub fanout: FanoutConfig,
    /// Overall limit on one outbound HTTP request.
    pub request_timeout: Duration,
}

impl Default for LaunchOptions {
    fn default() -> Self {
        LaunchOptions {
            periodic_sync: true,
            fanout: FanoutConfig::default(),
            request_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Component {
    Index,
    Node(String),
}

/// One listening server.
#[derive(Debug)]
struct Running {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
    background: Option<JoinHandle<()>>,
}

impl Running {
    fn spawn(listener: TcpListener, router: Router) -> Running {
        let addr = listener.local_addr().expect("bound listener has an address");
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let served = axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
            if let Err(e) = served {
                tracing::error!(%addr, error = %e, "server stopped");
            }
        });
        Running {
            addr,
            shutdown: Some(tx),
            task,
            background: None,
        }
    }

    async fn stop(mut self) {
        if let Some(bg) = self.background.take() {
            bg.abort();
        }
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let abort = self.task.abort_handle();
        if tokio::time::timeout(Duration::from_secs(2), &mut self.task).await.is_err() {
            abort.abort();
        }
    }
}

struct NodeHandle {
    state: Arc<NodeState>,
    server: Running,
}

/// A running set of federation servers.
pub struct Federation {
    topology: Topology,
    keyring: Arc<KeyRing>,
    http: reqwest::Client,
    index: Option<(Arc<IndexService>, Running)>,
    nodes: BTreeMap<String, NodeHandle>,
}

impl std::fmt::Debug for Federation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Federation")
            .field("index", &self.index.as_ref().map(|(_, r)| r.addr))
            .field("nodes", &self.nodes.iter().map(|(h, n)| (h, n.server.addr)).collect::<Vec<_>>())
            .finish()
    }
}

impl Federation {
    /// Starts every server in the topology. Port 0 listen addresses get
    /// ephemeral ports; [`Federation::topology`] reports the bound ones.
    pub async fn start(topology: &Topology, options: LaunchOptions) -> Result<Federation, LaunchError> {
        let mut all = vec![Component::Index];
        all.extend(topology.hospital_ids().into_iter().map(Component::Node));
        Self::start_components(topology, options, &all).await
    }

    pub async fn start_components(
        topology: &Topology,
        options: LaunchOptions,
        components: &[Component],
    ) -> Result<Federation, LaunchError> {
        let mut topology = topology.clone();
        for c in components {
            if let Component::Node(h) = c {
                topology.hospital(h).ok_or_else(|| LaunchError::UnknownHospital(h.clone()))?;
            }
        }

        let mut index_listener = None;
        let mut node_listeners = BTreeMap::new();
        for c in components {
            match c {
                Component::Index => {
                    let l = ctx!(TcpListener::bind(topology.index.listen).await, "bind index")?;
                    topology.index.listen = ctx!(l.local_addr(), "index address")?;
                    index_listener = Some(l);
                }
                Component::Node(h) => {
                    let spec = topology.hospitals.iter_mut().find(|s| s.hospital_id == *h).expect("checked above");
                    let l = ctx!(TcpListener::bind(spec.listen).await, format!("bind {h}"))?;
                    spec.listen = ctx!(l.local_addr(), format!("{h} address"))?;
                    node_listeners.insert(h.clone(), l);
                }
            }
        }

        let keyring = Arc::new(topology.keyring()?);
        let http = http_client(options.request_timeout);
        let durability: Durability = topology.durability.into();

        let index = match index_listener {
            Some(listener) => {
                let service = Arc::new(open_index(&topology.index.data_dir, Arc::clone(&keyring), durability)?);
                let server = Running::spawn(listener, index_http::router(Arc::clone(&service)));
                tracing::info!(addr = %server.addr, "index server listening");
                Some((service, server))
            }
            None => None,
        };

        let federation_key = topology.federation_key()?;
        let mut nodes = BTreeMap::new();
        for (h, listener) in node_listeners {
            let cfg = topology.node_config(&h).expect("checked above");
            let state = Arc::new(open_node(&cfg, Arc::clone(&keyring), federation_key.clone(), &http, &options)?);
            let mut server = Running::spawn(listener, node_http::router(Arc::clone(&state)));
            if options.periodic_sync {
                server.background = Some(spawn_periodic_sync(Arc::clone(&state), cfg.sync_interval_secs));
            }
            tracing::info!(hospital = %h, addr = %server.addr, "hospital node listening");
            nodes.insert(h, NodeHandle { state, server });
        }

        Ok(Federation {
            topology,
            keyring,
            http,
            index,
            nodes,
        })
    }

    /// The topology with the addresses actually bound.
    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn keyring(&self) -> &Arc<KeyRing> {
        &self.keyring
    }

    pub fn http(&self) -> &reqwest::Client {
        &self.http
    }

    pub fn index_url(&self) -> String {
        self.topology.index_url()
    }

    pub fn node_url(&self, hospital_id: &str) -> Option<String> {
        self.topology.hospital_urls().remove(hospital_id)
    }

    pub fn index_service(&self) -> Option<&Arc<IndexService>> {
        self.index.as_ref().map(|(s, _)| s)
    }

    pub fn node(&self, hospital_id: &str) -> Option<&Arc<NodeState>> {
        self.nodes.get(hospital_id).map(|n| &n.state)
    }

    pub fn running_nodes(&self) -> Vec<String> {
        self.nodes.keys().cloned().collect()
    }

    /// Stops one hospital's server. Its data stays on disk.
    pub async fn stop_node(&mut self, hospital_id: &str) -> Result<(), LaunchError> {
        let handle = self
            .nodes
            .remove(hospital_id)
            .ok_or_else(|| LaunchError::UnknownHospital(hospital_id.to_string()))?;
        handle.server.stop().await;
        Ok(())
    }

    pub async fn shutdown(mut self) {
        for (_, n) in std::mem::take(&mut self.nodes) {
            n.server.stop().await;
        }
        if let Some((_, server)) = self.index.take() {
            server.stop().await;
        }
    }

    /// Runs until `signal` completes, then shuts down.
    pub async fn run_until<F: Future<Output = ()>>(self, signal: F) {
        signal.await;
        tracing::info!("shutting down");
        self.shutdown().await;
    }
}

pub fn open_index(dir: &Path, keyring: Arc<KeyRing>, durability: Durability) -> Result<IndexService, LaunchError> {
    ctx!(std::fs::create_dir_all(dir), dir.display())?;
    let index = ctx!(PatientIndex::open(dir), "open patient index")?;
    let audit = ctx!(AuditLog::open(dir, INDEX_SERVER_ID, durability), "open index audit log")?;
    Ok(IndexService::new(Arc::new(index), Gate::new(keyring), Arc::new(audit)))
}

pub fn open_node(
    cfg: &NodeConfig,
    keyring: Arc<KeyRing>,
    federation_key: FederationKey,
    http: &reqwest::Client,
    options: &LaunchOptions,
) -> Result<NodeState, LaunchError> {
    let h = cfg.hospital_id.as_str();
    let durability: Durability = cfg.durability.into();
    ctx!(std::fs::create_dir_all(&cfg.data_dir), cfg.data_dir.display())?;
    let credentials = ctx!(CredentialTable::load(&cfg.credentials), cfg.credentials.display())?;
    if credentials.hospital_id != h {
        return Err(setup(cfg.credentials.display())(&format!("credentials belong to {}", credentials.hospital_id)));
    }
    let audit = Arc::new(ctx!(AuditLog::open(&cfg.data_dir, h, durability), format!("open {h} audit log"))?);
    let store = Arc::new(ctx!(RecordStore::open(&cfg.data_dir, h, durability), format!("open {h} record store"))?);

    let registry = MappingRegistry::new();
    let mapping = ctx!(FieldMapping::load(&cfg.mapping), cfg.mapping.display())?;
    if mapping.hospital_id != h {
        return Err(setup(cfg.mapping.display())(&format!("mapping belongs to {}", mapping.hospital_id)));
    }
    ctx!(registry.register(mapping), cfg.mapping.display())?;
    let legacy = ctx!(LegacyStore::open(h, &cfg.legacy_store), cfg.legacy_store.display())?;

    let auth = Arc::new(AuthService::new(h, Arc::clone(&keyring), &credentials, federation_key.clone(), Arc::clone(&audit)));
    let node = Arc::new(HospitalNode::new(Arc::clone(&store), auth.gate(), audit));
    let agent = Arc::new(SyncAgent::new(legacy, Arc::new(registry), federation_key, store, &cfg.data_dir));
    Ok(NodeState {
        index: IndexClient::new(&cfg.index_url, http.clone()).publishing_as(Arc::clone(&auth)),
        peers: PeerClient::new(cfg.peers.clone(), http.clone()),
        auth,
        node,
        agent,
        fanout: options.fanout,
    })
}

fn spawn_periodic_sync(state: Arc<NodeState>, every_secs: u64) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut ticks = tokio::time::interval(Duration::from_secs(every_secs));
        ticks.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            ticks.tick().await;
            match state.sync_now().await {
                Ok(report) if report.errors.is_empty() => {
                    tracing::debug!(hospital = %state.hospital_id(), pushed = report.pushed, "sync pass")
                }
                Ok(report) => {
                    tracing::warn!(hospital = %state.hospital_id(), errors = report.errors.len(), "sync pass with errors")
                }
                Err(e) => tracing::warn!(hospital = %state.hospital_id(), error = %e, "sync pass failed"),
            }
        }
    })
}
