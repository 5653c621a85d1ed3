//! Server and client state machines, message types and their wire layout,
//! and the synchronous / buffered / fully asynchronous baselines.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgl::{
    aggregate_models, blend_local, cluster_set, compute_lsc, compute_sfm, cosine_similarity, label_propagation,
    staleness_weights, FglHyper, KnowledgeBase, KnowledgeBaseEntry, LscValue, Sfm,
};
use crate::gcn::{forward, train_epoch, ModelParams};
use crate::partition::ClientData;

/// Aggregation rule run by the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Clustered, staleness-aware semi-asynchronous aggregation with cluster broadcast.
    FedSaGcl,
    /// Wait for every client, weight by train-node count, broadcast to all.
    FedAvgSync,
    /// Average every `K` buffered uploads, reply only to the buffered clients.
    FedBuff,
    /// Mix each single upload into the global model with polynomial staleness decay.
    FedAsync,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FedSaGcl,
        Strategy::FedAvgSync,
        Strategy::FedBuff,
        Strategy::FedAsync,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedSaGcl => "fedsagcl",
            Strategy::FedAvgSync => "fedavgsync",
            Strategy::FedBuff => "fedbuff",
            Strategy::FedAsync => "fedasync",
        }
    }

    /// Whether clients block after uploading until the server replies.
    pub fn is_synchronous(self) -> bool {
        matches!(self, Strategy::FedAvgSync)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadMessage {
    pub client_id: usize,
    pub tau: u64,
    pub params: ModelParams,
    pub sfm: Sfm,
    pub lsc: LscValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownloadMessage {
    pub params: ModelParams,
    pub round: u64,
    /// Present only on cluster broadcasts.
    pub cluster_lsc: Option<f64>,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let out = bytes
        .get(*pos..*pos + len)
        .ok_or_else(|| Error::Contract(format!("truncated message: {what}")))?;
    *pos += len;
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4, what)?.try_into().unwrap()))
}

fn read_u64(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, pos, 8, what)?.try_into().unwrap()))
}

fn read_f64(bytes: &[u8], pos: &mut usize, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(take(bytes, pos, 8, what)?.try_into().unwrap()))
}

fn read_params(bytes: &[u8], pos: &mut usize) -> Result<ModelParams> {
    let (params, used) = ModelParams::read_blob(&bytes[(*pos).min(bytes.len())..])?;
    *pos += used;
    Ok(params)
}

impl UploadMessage {
    /// `[u32 client_id][u64 tau][params blob][u32 C][C² f64 SFM][f64 lsc_raw]`
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.client_id as u32).to_le_bytes());
        out.extend_from_slice(&self.tau.to_le_bytes());
        self.params.write_blob(&mut out);
        out.extend_from_slice(&(self.sfm.num_classes() as u32).to_le_bytes());
        for v in self.sfm.flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.lsc.raw.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let client_id = read_u32(bytes, &mut pos, "client id")? as usize;
        let tau = read_u64(bytes, &mut pos, "tau")?;
        let params = read_params(bytes, &mut pos)?;
        let c = read_u32(bytes, &mut pos, "class count")? as usize;
        let values = (0..c * c)
            .map(|_| read_f64(bytes, &mut pos, "SFM"))
            .collect::<Result<Vec<_>>>()?;
        let lsc = LscValue::new(read_f64(bytes, &mut pos, "LSC")?);
        if pos != bytes.len() {
            return Err(Error::Contract("trailing bytes after upload message".into()));
        }
        Ok(Self {
            client_id,
            tau,
            params,
            sfm: Sfm::from_flat(c, values)?,
            lsc,
        })
    }
}

impl DownloadMessage {
    /// `[u64 round][u8 has_lsc][optional f64][params blob]`
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.round.to_le_bytes());
        match self.cluster_lsc {
            Some(l) => {
                out.push(1);
                out.extend_from_slice(&l.to_le_bytes());
            }
            None => out.push(0),
        }
        self.params.write_blob(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let round = read_u64(bytes, &mut pos, "round")?;
        let cluster_lsc = match take(bytes, &mut pos, 1, "lsc flag")?[0] {
            0 => None,
            1 => Some(read_f64(bytes, &mut pos, "cluster LSC")?),
            other => return Err(Error::Contract(format!("bad lsc flag {other}"))),
        };
        let params = read_params(bytes, &mut pos)?;
        if pos != bytes.len() {
            return Err(Error::Contract("trailing bytes after download message".into()));
        }
        Ok(Self {
            params,
            round,
            cluster_lsc,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeliveryKind {
    Personal,
    Broadcast,
    Baseline,
}

impl DeliveryKind {
    pub fn name(self) -> &'static str {
        match self {
            DeliveryKind::Personal => "personal",
            DeliveryKind::Broadcast => "broadcast",
            DeliveryKind::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub dst: usize,
    pub kind: DeliveryKind,
    pub message: DownloadMessage,
}

impl Delivery {
    /// `t=<round> kind=<kind> src=server dst=<client> tau=<round stamp>`
    pub fn trace_line(&self) -> String {
        format!(
            "t={} kind={} src=server dst={} tau={}",
            self.message.round,
            self.kind.name(),
            self.dst,
            self.message.round
        )
    }
}

/// What one clustered aggregation did, for auditing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregationReport {
    pub round: u64,
    pub uploaded: BTreeSet<usize>,
    pub clusters: BTreeMap<usize, BTreeSet<usize>>,
    /// Staleness weights per uploaded client, aligned with its cluster order.
    pub weights: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutcome {
    pub deliveries: Vec<Delivery>,
    pub report: Option<AggregationReport>,
}

/// Switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerOptions {
    /// Push cluster models to similar clients that did not upload.
    pub clustercast: bool,
    /// Aggregate over SFM similarity clusters; when off every cluster is `{i}`.
    pub sfm_clustering: bool,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            clustercast: true,
            sfm_clustering: true,
        }
    }
}

/// Mixing rate of the fully asynchronous baseline.
pub const FEDASYNC_BETA: f64 = 0.5;

pub struct ServerState {
    strategy: Strategy,
    hyper: FglHyper,
    options: ServerOptions,
    buffer_k: usize,
    round: u64,
    kb: KnowledgeBase,
    queue: VecDeque<UploadMessage>,
    global: ModelParams,
    /// Train-node count of every participating client.
    train_sizes: BTreeMap<usize, usize>,
    sync_pending: BTreeMap<usize, UploadMessage>,
}

impl ServerState {
    pub fn new(
        strategy: Strategy,
        hyper: FglHyper,
        options: ServerOptions,
        buffer_k: usize,
        initial: ModelParams,
        train_sizes: BTreeMap<usize, usize>,
    ) -> Result<Self> {
        if buffer_k == 0 {
            return Err(Error::config("k", "buffer threshold must be at least 1"));
        }
        hyper.validate()?;
        Ok(Self {
            strategy,
            hyper,
            options,
            buffer_k,
            round: 0,
            kb: KnowledgeBase::new(),
            queue: VecDeque::new(),
            global: initial,
            train_sizes,
            sync_pending: BTreeMap::new(),
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn knowledge_base(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn enqueue(&mut self, msg: UploadMessage) {
        self.queue.push_back(msg);
    }

    /// Replaces the knowledge-base entry of the sender wholesale.
    pub fn kb_update(&mut self, msg: UploadMessage) {
        self.kb.insert(
            msg.client_id,
            KnowledgeBaseEntry {
                client_id: msg.client_id,
                params: msg.params,
                sfm: msg.sfm,
                lsc: msg.lsc,
                tau: msg.tau,
            },
        );
    }

    /// Routes one upload through the configured strategy.
    pub fn handle_upload(&mut self, msg: UploadMessage) -> Result<StepOutcome> {
        match self.strategy {
            Strategy::FedSaGcl => {
                self.enqueue(msg);
                self.server_step_with_report()
            }
            _ => Ok(StepOutcome {
                deliveries: self.baseline_step(msg)?,
                report: None,
            }),
        }
    }

    pub fn server_step(&mut self) -> Result<Vec<Delivery>> {
        Ok(self.server_step_with_report()?.deliveries)
    }

    /// Clustered aggregation, triggered once `K` uploads are queued.
    pub fn server_step_with_report(&mut self) -> Result<StepOutcome> {
        if self.strategy != Strategy::FedSaGcl {
            return Err(Error::Contract("server_step runs only the clustered strategy".into()));
        }
        if self.queue.len() < self.buffer_k {
            return Ok(StepOutcome::default());
        }
        self.round += 1;
        let t = self.round;
        let mut uploaded = BTreeSet::new();
        while let Some(msg) = self.queue.pop_front() {
            uploaded.insert(msg.client_id);
            self.kb_update(msg);
        }

        let mut report = AggregationReport {
            round: t,
            uploaded: uploaded.clone(),
            ..Default::default()
        };
        let mut deliveries = Vec::with_capacity(uploaded.len());
        let mut models: BTreeMap<usize, ModelParams> = BTreeMap::new();
        // Broadcast recipient -> (similarity to source, source, cluster LSC sum).
        let mut broadcast: BTreeMap<usize, (f64, usize, f64)> = BTreeMap::new();
        for &i in &uploaded {
            let cluster = if self.options.sfm_clustering {
                cluster_set(i, &self.kb, self.hyper.theta)?
            } else {
                BTreeSet::from([i])
            };
            let entries: Vec<&KnowledgeBaseEntry> = cluster.iter().map(|c| &self.kb[c]).collect();
            let weights = staleness_weights(&entries, t, self.hyper.alpha)?;
            let params: Vec<&ModelParams> = entries.iter().map(|e| &e.params).collect();
            let model = aggregate_models(&params, &weights)?;
            deliveries.push(Delivery {
                dst: i,
                kind: DeliveryKind::Personal,
                message: DownloadMessage {
                    params: model.clone(),
                    round: t,
                    cluster_lsc: None,
                },
            });
            if self.options.clustercast {
                let lsc_sum: f64 = entries.iter().map(|e| e.lsc.clamped).sum();
                for &s in cluster.difference(&uploaded) {
                    let sim = cosine_similarity(&self.kb[&s].sfm, &self.kb[&i].sfm)?;
                    // Uploaded clients are visited ascending, so keeping the first
                    // of equal similarities picks the lower source id.
                    let replace = broadcast.get(&s).is_none_or(|&(best, _, _)| sim > best);
                    if replace {
                        broadcast.insert(s, (sim, i, lsc_sum));
                    }
                }
            }
            models.insert(i, model);
            report.clusters.insert(i, cluster);
            report.weights.insert(i, weights);
        }
        for (s, (_, src, lsc_sum)) in broadcast {
            deliveries.push(Delivery {
                dst: s,
                kind: DeliveryKind::Broadcast,
                message: DownloadMessage {
                    params: models[&src].clone(),
                    round: t,
                    cluster_lsc: Some(lsc_sum),
                },
            });
        }
        Ok(StepOutcome {
            deliveries,
            report: Some(report),
        })
    }

    /// One upload under a baseline strategy.
    pub fn baseline_step(&mut self, incoming: UploadMessage) -> Result<Vec<Delivery>> {
        match self.strategy {
            Strategy::FedSaGcl => Err(Error::Contract("baseline_step called for the clustered strategy".into())),
            Strategy::FedAvgSync => {
                self.sync_pending.insert(incoming.client_id, incoming);
                if !self.train_sizes.keys().all(|c| self.sync_pending.contains_key(c)) {
                    return Ok(Vec::new());
                }
                let total: usize = self.train_sizes.values().sum();
                let pending = std::mem::take(&mut self.sync_pending);
                let (params, weights): (Vec<&ModelParams>, Vec<f64>) = self
                    .train_sizes
                    .iter()
                    .map(|(c, &n)| (&pending[c].params, n as f64 / total as f64))
                    .unzip();
                self.global = aggregate_models(&params, &weights)?;
                self.round += 1;
                Ok(self.broadcast_global(self.train_sizes.keys().copied()))
            }
            Strategy::FedBuff => {
                self.queue.push_back(incoming);
                if self.queue.len() < self.buffer_k {
                    return Ok(Vec::new());
                }
                let buffered: Vec<UploadMessage> = self.queue.drain(..).collect();
                let w = vec![1.0 / buffered.len() as f64; buffered.len()];
                let params: Vec<&ModelParams> = buffered.iter().map(|m| &m.params).collect();
                self.global = aggregate_models(&params, &w)?;
                self.round += 1;
                let recipients: BTreeSet<usize> = buffered.iter().map(|m| m.client_id).collect();
                Ok(self.broadcast_global(recipients))
            }
            Strategy::FedAsync => {
                let staleness = self.round.saturating_sub(incoming.tau) as f64;
                let mix = FEDASYNC_BETA * (staleness + 1.0).powf(-self.hyper.alpha);
                for (g, &u) in self.global.as_mut_slice().iter_mut().zip(incoming.params.as_slice()) {
                    *g += mix * (u - *g);
                }
                self.round += 1;
                Ok(self.broadcast_global([incoming.client_id]))
            }
        }
    }

    fn broadcast_global(&self, to: impl IntoIterator<Item = usize>) -> Vec<Delivery> {
        to.into_iter()
            .map(|dst| Delivery {
                dst,
                kind: DeliveryKind::Baseline,
                message: DownloadMessage {
                    params: self.global.clone(),
                    round: self.round,
                    cluster_lsc: None,
                },
            })
            .collect()
    }
}

/// Download slot holding at most one message; a newer delivery replaces
/// the older one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mailbox {
    slot: Option<DownloadMessage>,
    discarded: usize,
}

impl Mailbox {
    pub fn deliver(&mut self, msg: DownloadMessage) {
        if self.slot.replace(msg).is_some() {
            self.discarded += 1;
        }
    }

    pub fn take(&mut self) -> Option<DownloadMessage> {
        self.slot.take()
    }

    pub fn peek(&self) -> Option<&DownloadMessage> {
        self.slot.as_ref()
    }

    pub fn len(&self) -> usize {
        usize::from(self.slot.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.slot.is_none()
    }

    /// Messages overwritten before being read.
    pub fn discarded(&self) -> usize {
        self.discarded
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub data: ClientData,
    pub params: ModelParams,
    pub mailbox: Mailbox,
    /// Round stamp of the last model received.
    pub tau: u64,
}

/// SFM and LSC of a model on local data.
pub fn local_statistics(params: &ModelParams, data: &ClientData, hyper: &FglHyper) -> Result<(Sfm, LscValue)> {
    let soft = forward(params, data)?;
    let sfm = compute_sfm(&soft, data)?;
    let propagated = label_propagation(&soft, data, hyper.lambda, hyper.k_steps)?;
    Ok((sfm, compute_lsc(&propagated, data)?))
}

impl ClientState {
    pub fn new(data: ClientData, params: ModelParams) -> Self {
        Self {
            data,
            params,
            mailbox: Mailbox::default(),
            tau: 0,
        }
    }

    pub fn client_id(&self) -> usize {
        self.data.client_id()
    }

    /// Applies the latest download (if any) between trips.
    pub fn apply_mailbox(&mut self, hyper: &FglHyper) -> Result<()> {
        let Some(msg) = self.mailbox.take() else {
            return Ok(());
        };
        match msg.cluster_lsc {
            None => self.params = msg.params,
            Some(cluster_lsc) => {
                let (_, local) = local_statistics(&self.params, &self.data, hyper)?;
                self.params = blend_local(&msg.params, &self.params, cluster_lsc, local.clamped)?;
            }
        }
        self.tau = msg.round;
        Ok(())
    }

    /// One client trip: consume the mailbox, train one epoch, summarize, upload.
    pub fn client_trip(&mut self, hyper: &FglHyper, lr: f64) -> Result<UploadMessage> {
        if self.data.masks().train.is_empty() {
            return Err(Error::Training(format!(
                "client {} has no labeled training nodes",
                self.client_id()
            )));
        }
        self.apply_mailbox(hyper)?;
        self.params = train_epoch(&self.params, &self.data, lr)?;
        let (sfm, lsc) = local_statistics(&self.params, &self.data, hyper)?;
        Ok(UploadMessage {
            client_id: self.client_id(),
            tau: self.tau,
            params: self.params.clone(),
            sfm,
            lsc,
        })
    }
}
