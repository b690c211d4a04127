#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use annserve_core::corpus::{ingest, ChunkingConfig};
use annserve_core::embed::{EmbeddingVector, Encoder, EncoderDescriptor, EncoderRole, ReferenceEncoder};
use annserve_core::engine::{Engine, EngineConfig};
use annserve_core::graph::VamanaParams;
use annserve_core::ivfpq::IvfPqParams;
use annserve_core::pipeline::{build_graph_file, build_ivfpq_file, embed_store, EmbedOptions};
use annserve_core::synth::documents;
use annserve_server::{ServeConfig, ServeError, Server};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::oneshot;

pub const DIM: usize = 64;

/// A 1000-chunk corpus with reference vectors and both indexes.
pub fn build_corpus(dir: &Path) -> EngineConfig {
    let cfg = ChunkingConfig {
        window_tokens: 64,
        overlap_tokens: 8,
        strict: true,
    };
    let store = ingest(documents(1000, 30, 4).into_iter().map(Ok), &cfg, &dir.join("store")).unwrap();
    assert_eq!(store.len(), 1000);
    let desc = EncoderDescriptor::reference(DIM, EncoderRole::Retrieval);
    embed_store(&store, &ReferenceEncoder::new(desc.clone()), &dir.join("v.vec"), &EmbedOptions::default()).unwrap();
    build_graph_file(&dir.join("v.vec"), &VamanaParams::new(16, 32, 1.2, 1), &dir.join("g.vmna")).unwrap();
    build_ivfpq_file(&dir.join("v.vec"), &IvfPqParams::new(32, 8, 1), &dir.join("i.ivpq")).unwrap();
    let mut config = EngineConfig::new(dir.join("store"), desc);
    config.graph = Some(dir.join("g.vmna"));
    config.ivfpq = Some(dir.join("i.ivpq"));
    config
}

pub fn serve_config(engine: EngineConfig, dir: &Path) -> ServeConfig {
    let mut c = ServeConfig::new(engine, dir.join("votes.jsonl"));
    c.listen = "127.0.0.1:0".into();
    c
}

/// A server on its own runtime thread.
pub struct Running {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<(), ServeError>>>,
}

impl Running {
    pub fn start(config: &ServeConfig) -> Self {
        Self::start_with(config, None)
    }

    /// `engine` replaces opening `config.engine` when given.
    pub fn start_with(config: &ServeConfig, engine: Option<Engine>) -> Self {
        let config = config.clone();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
            rt.block_on(async move {
                let server = match engine {
                    Some(e) => Server::with_engine(e, &config).await?,
                    None => Server::bind(&config).await?,
                };
                addr_tx.send(server.local_addr()?).unwrap();
                server
                    .run(async move {
                        let _ = stop_rx.await;
                    })
                    .await
            })
        });
        let addr = addr_rx.recv_timeout(Duration::from_secs(120)).expect("server failed to start");
        Self {
            addr,
            stop: Some(stop_tx),
            thread: Some(thread),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn post<T: Serialize>(&self, path: &str, body: &T) -> (u16, serde_json::Value) {
        post(&self.url(path), body)
    }

    pub fn get(&self, path: &str) -> (u16, serde_json::Value) {
        let mut r = agent().get(&self.url(path)).call().unwrap();
        let status = r.status().as_u16();
        (status, r.body_mut().read_json().unwrap_or(serde_json::Value::Null))
    }

    pub fn post_as<T: Serialize, R: DeserializeOwned>(&self, path: &str, body: &T) -> R {
        let (status, v) = self.post(path, body);
        assert_eq!(status, 200, "{path}: {v}");
        serde_json::from_value(v).unwrap()
    }

    /// Signals shutdown and waits for the drain to finish.
    pub fn stop(mut self) -> Result<(), ServeError> {
        self.stop.take().unwrap().send(()).ok();
        self.thread.take().unwrap().join().unwrap()
    }

    pub fn signal_stop(&mut self) {
        if let Some(s) = self.stop.take() {
            s.send(()).ok();
        }
    }

    pub fn join(mut self) -> Result<(), ServeError> {
        self.thread.take().unwrap().join().unwrap()
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            s.send(()).ok();
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(120)))
        .build()
        .into()
}

pub fn post<T: Serialize>(url: &str, body: &T) -> (u16, serde_json::Value) {
    let mut r = agent().post(url).send_json(body).unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json().unwrap_or(serde_json::Value::Null))
}

/// Reference encoder that sleeps before every call.
pub struct Slow {
    pub inner: ReferenceEncoder,
    pub delay: Duration,
}

impl Encoder for Slow {
    fn descriptor(&self) -> &EncoderDescriptor {
        self.inner.descriptor()
    }
    fn encode(&self, texts: &[&str]) -> annserve_core::Result<Vec<EmbeddingVector>> {
        std::thread::sleep(self.delay);
        self.inner.encode(texts)
    }
}

pub fn slow_engine(config: &EngineConfig, delay: Duration) -> Engine {
    let slow = Arc::new(Slow {
        inner: ReferenceEncoder::new(config.encoder.clone()),
        delay,
    });
    let rerank = Arc::new(ReferenceEncoder::new(EncoderDescriptor::reference(DIM, EncoderRole::Rerank)));
    Engine::with_encoders(config, slow, rerank).unwrap()
}
