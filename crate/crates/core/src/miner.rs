//! Region-description and super-entity-name mining through an LLM endpoint.
//!
//! Two sources are supported. Online mode POSTs `{"prompt": ...}` to an HTTP
//! endpoint that answers `{"text": ...}` and archives every exchange under a
//! request hash; a repeated request is answered from the archive. Fixture
//! mode reads canned raw responses from disk and never touches the network.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::{RegionDescriptionSet, RegionKey};

/// Environment variable naming the default online endpoint.
pub const ENDPOINT_ENV: &str = "RAHP_LLM_ENDPOINT";

pub const REGION_FIXTURE_FILE: &str = "region_descriptions.json";
pub const SUPER_NAME_FIXTURE_FILE: &str = "super_names.json";

#[derive(Debug, Error)]
pub enum MinerError {
    #[error("endpoint {endpoint} unreachable: {message}")]
    EndpointUnreachable { endpoint: String, message: String },
    #[error("unparseable response ({reason}); raw response archived at {archived:?}")]
    UnparseableResponse {
        reason: String,
        archived: Option<PathBuf>,
    },
    #[error("no fixture for {0}")]
    MissingFixture(String),
    #[error("invalid mining request: {0}")]
    InvalidRequest(String),
    #[error("i/o failure on {path}: {message}")]
    Io { path: String, message: String },
}

impl MinerError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::EndpointUnreachable { .. } => "EndpointUnreachable",
            Self::UnparseableResponse { .. } => "UnparseableResponse",
            Self::MissingFixture(_) => "MissingFixture",
            Self::InvalidRequest(_) => "InvalidRequest",
            Self::Io { .. } => "IoFailure",
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> MinerError {
    MinerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Where answers come from. Exactly one source is active per request.
#[derive(Debug, Clone, PartialEq)]
pub enum MiningSource {
    Online { endpoint: String, archive_dir: PathBuf },
    Fixtures(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MiningPayload {
    /// A (super-subject, predicate, super-object) triplet.
    Triplet(RegionKey),
    /// One member list per cluster.
    Clusters(Vec<Vec<String>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningRequest {
    pub payload: MiningPayload,
    pub source: MiningSource,
}

impl MiningRequest {
    pub fn region_descriptions(triplet: RegionKey, source: MiningSource) -> Self {
        Self {
            payload: MiningPayload::Triplet(triplet),
            source,
        }
    }

    pub fn super_names(clusters: Vec<Vec<String>>, source: MiningSource) -> Self {
        Self {
            payload: MiningPayload::Clusters(clusters),
            source,
        }
    }
}

/// Sends one request body to an endpoint and returns the raw response body.
pub trait LlmTransport: Send + Sync {
    fn post(&self, endpoint: &str, body: &str) -> Result<String, MinerError>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl LlmTransport for HttpTransport {
    fn post(&self, endpoint: &str, body: &str) -> Result<String, MinerError> {
        let unreachable = |e: ureq::Error| MinerError::EndpointUnreachable {
            endpoint: endpoint.to_string(),
            message: e.to_string(),
        };
        let mut response = self
            .agent
            .post(endpoint)
            .header("content-type", "application/json")
            .send(body)
            .map_err(unreachable)?;
        response.body_mut().read_to_string().map_err(unreachable)
    }
}

const REGION_PROMPT_HEAD: &str = "Describe [{subject}] [{predicate}] [{object}] which parts of subject and object function in this relationship. Please list these parts, and then analyze and describe the visual relationship between these parts.
The generated description should be concise and clear. Here are two examples for you to learn:";

const REGION_PROMPT_EXAMPLES: &str = r#"Example A: "[human] [holding] [wild animal]":
Subject Part : [hand, arm, legs, ...]
Object Part : [animal limbs, animal body, ...]
Region Descriptions :
["human hand(s) securely gripping the animal", "human arm(s) embracing or supporting the animal", "animal positioned close to or physically touching the human's torso", "animal appears stable and not struggling", "direct gaze or interaction between the human and the animal suggesting control or care", "human fingers intertwined or wrapped around the animal's body or limbs", "animal's posture conveys being held, often with limbs tucked or supported", "proximity of the human face to the animal, especially when holding smaller animals", "human holding the animal with hands", "human's hands or arms in contact with the animal", "animal is held in the human's arms"]

Example B: "[human] [sitting on] [seating furniture]":
Subject Part : [buttocks, thighs, legs, back, arms]
Object Part : [seat, backrest, armrests]
Region Descriptions :
["Human's buttocks are making contact with the seat of the furniture.", "Human's thighs rest on the seat, with legs positioned either bent or extended.", "Human's back is supported by the backrest of the furniture.", "Human's arms may be resting on or near the armrests of the furniture, if present.", "The furniture's seat aligns with the human's buttocks and thighs, indicating proper seating support.", "The human's posture is influenced by the backrest, which can be either upright or reclining.", "The armrests, if present, support the human's arms, enhancing comfort and stability.", "The arrangement of the human's legs and feet suggests their interaction with the seat and alignment with the furniture."]"#;

const SUPER_NAME_PROMPT: &str = "Task Description: You will be provided with a set of predicates related to specific actions, states, or relationships. Your task is to generate an appropriate superclass category name that effectively encapsulates the common characteristics of these predicates.

Input: You will receive the following set of predicates.
{members}

Output: Please provide a concise and specific superclass category name that encompasses all the given predicates. The superclass name should be between one to three words and should use general and easily understandable vocabulary.";

/// Full region-description prompt for one triplet, few-shot examples included.
pub fn region_prompt_text(triplet: &RegionKey) -> String {
    let head = REGION_PROMPT_HEAD
        .replace("{subject}", &triplet.subject)
        .replace("{predicate}", &triplet.predicate)
        .replace("{object}", &triplet.object);
    format!("{head}\n\n{REGION_PROMPT_EXAMPLES}\n")
}

/// Super-entity naming prompt for one cluster.
pub fn super_name_prompt_text(members: &[String]) -> String {
    let list = format!("[{}]", members.join(", "));
    SUPER_NAME_PROMPT.replace("{members}", &list)
}

fn is_open_quote(c: char) -> Option<char> {
    match c {
        '"' => Some('"'),
        '\u{201C}' => Some('\u{201D}'),
        _ => None,
    }
}

/// Extracts the quoted strings of the first bracketed list after the
/// "Region Descriptions" label (or anywhere, when no label is present).
///
/// Items may be separated by commas, whitespace, or nothing. Returns `None`
/// when no terminated list with at least one item exists.
pub fn parse_region_descriptions(text: &str) -> Option<Vec<String>> {
    let lower = text.to_lowercase();
    let start = ["region descriptions", "region rescriptions"]
        .iter()
        .filter_map(|label| lower.find(label).map(|i| i + label.len()))
        .min()
        .unwrap_or(0);
    // lowercasing can shift byte offsets for non-ASCII text
    let start = if text.is_char_boundary(start) { start } else { 0 };
    let rest = &text[start..];
    let open = rest.find('[')?;
    let mut items = Vec::new();
    let mut chars = rest[open + 1..].chars();
    while let Some(c) = chars.next() {
        if c == ']' {
            return (!items.is_empty()).then_some(items);
        }
        if let Some(close) = is_open_quote(c) {
            let mut item = String::new();
            loop {
                match chars.next() {
                    Some(q) if q == close => break,
                    Some(q) => item.push(q),
                    None => return None,
                }
            }
            let item = item.trim().to_string();
            if !item.is_empty() {
                items.push(item);
            }
        }
    }
    None
}

/// First meaningful line of a naming response, stripped of labels and quoting.
pub fn parse_super_name(text: &str) -> Option<String> {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = match line.split_once(':') {
        Some((_, rest)) if !rest.trim().is_empty() => rest,
        _ => line,
    };
    let name = line
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '*' | '[' | ']' | '.' | '`') || c.is_whitespace())
        .to_string();
    (!name.is_empty()).then_some(name)
}

#[derive(Serialize, Deserialize)]
struct ArchivedRequest {
    kind: String,
    endpoint: String,
    prompt: String,
}

#[derive(Serialize, Deserialize)]
struct ArchiveRecord {
    request: ArchivedRequest,
    raw_response: String,
    parsed: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct PromptBody<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TextBody {
    text: String,
}

/// Hex SHA-256 of the canonical request.
pub fn request_hash(kind: &str, endpoint: &str, prompt: &str) -> String {
    let canonical = serde_json::to_vec(&ArchivedRequest {
        kind: kind.into(),
        endpoint: endpoint.into(),
        prompt: prompt.into(),
    })
    .expect("request serializes");
    Sha256::digest(&canonical)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), MinerError> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

/// One online exchange: archive lookup, POST, parse, archive.
fn online_exchange<T, F>(
    kind: &str,
    endpoint: &str,
    archive_dir: &Path,
    prompt: &str,
    transport: &dyn LlmTransport,
    parse: F,
) -> Result<T, MinerError>
where
    T: Serialize + serde::de::DeserializeOwned,
    F: Fn(&str) -> Option<T>,
{
    std::fs::create_dir_all(archive_dir).map_err(|e| io_error(archive_dir, e))?;
    let path = archive_dir.join(format!("{}.json", request_hash(kind, endpoint, prompt)));
    if let Ok(bytes) = std::fs::read(&path) {
        if let Ok(ArchiveRecord {
            parsed: Some(parsed),
            ..
        }) = serde_json::from_slice(&bytes)
        {
            if let Ok(value) = serde_json::from_value(parsed) {
                return Ok(value);
            }
        }
    }
    let body = serde_json::to_string(&PromptBody { prompt }).expect("prompt serializes");
    let raw = transport.post(endpoint, &body)?;
    let parsed = serde_json::from_str::<TextBody>(&raw)
        .ok()
        .and_then(|t| parse(&t.text));
    let record = ArchiveRecord {
        request: ArchivedRequest {
            kind: kind.into(),
            endpoint: endpoint.into(),
            prompt: prompt.into(),
        },
        raw_response: raw,
        parsed: parsed
            .as_ref()
            .map(|p| serde_json::to_value(p).expect("parsed output serializes")),
    };
    let bytes = serde_json::to_vec_pretty(&record).expect("record serializes");
    write_atomic(&path, &bytes)?;
    parsed.ok_or_else(|| MinerError::UnparseableResponse {
        reason: format!("{kind} response did not contain the expected structure"),
        archived: Some(path),
    })
}

fn read_fixture_file(dir: &Path, name: &str) -> Result<String, MinerError> {
    let path = dir.join(name);
    std::fs::read_to_string(&path).map_err(|_| MinerError::MissingFixture(path.display().to_string()))
}

/// Mines region descriptions for one triplet.
pub fn mine_region_descriptions(
    req: &MiningRequest,
    transport: &dyn LlmTransport,
) -> Result<RegionDescriptionSet, MinerError> {
    let MiningPayload::Triplet(triplet) = &req.payload else {
        return Err(MinerError::InvalidRequest("expected a triplet payload".into()));
    };
    let descriptions = match &req.source {
        MiningSource::Fixtures(dir) => {
            let raw = read_fixture_file(dir, REGION_FIXTURE_FILE)?;
            let table: std::collections::BTreeMap<String, String> = serde_json::from_str(&raw)
                .map_err(|e| io_error(&dir.join(REGION_FIXTURE_FILE), e))?;
            let text = table
                .get(&triplet.to_string())
                .ok_or_else(|| MinerError::MissingFixture(triplet.to_string()))?;
            parse_region_descriptions(text).ok_or_else(|| MinerError::UnparseableResponse {
                reason: format!("fixture for {triplet} has no description list"),
                archived: None,
            })?
        }
        MiningSource::Online {
            endpoint,
            archive_dir,
        } => online_exchange(
            "region_descriptions",
            endpoint,
            archive_dir,
            &region_prompt_text(triplet),
            transport,
            parse_region_descriptions,
        )?,
    };
    let mut set = RegionDescriptionSet::default();
    set.insert(triplet.clone(), descriptions);
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperNames {
    pub names: Vec<String>,
    /// Names outside the one-to-three-word guideline.
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct SuperNameFixture {
    members: Vec<String>,
    response: String,
}

fn member_set(members: &[String]) -> BTreeSet<&str> {
    members.iter().map(String::as_str).collect()
}

/// Names each cluster; one request per cluster.
pub fn mine_super_names(
    req: &MiningRequest,
    transport: &dyn LlmTransport,
) -> Result<SuperNames, MinerError> {
    let MiningPayload::Clusters(clusters) = &req.payload else {
        return Err(MinerError::InvalidRequest("expected a cluster-list payload".into()));
    };
    if clusters.is_empty() {
        return Err(MinerError::InvalidRequest("empty cluster list".into()));
    }
    if let Some(i) = clusters.iter().position(Vec::is_empty) {
        return Err(MinerError::InvalidRequest(format!("cluster {i} has no members")));
    }
    let fixtures: Option<Vec<SuperNameFixture>> = match &req.source {
        MiningSource::Fixtures(dir) => {
            let raw = read_fixture_file(dir, SUPER_NAME_FIXTURE_FILE)?;
            Some(
                serde_json::from_str(&raw)
                    .map_err(|e| io_error(&dir.join(SUPER_NAME_FIXTURE_FILE), e))?,
            )
        }
        MiningSource::Online { .. } => None,
    };
    let mut names = Vec::with_capacity(clusters.len());
    let mut warnings = Vec::new();
    for members in clusters {
        let name = match (&req.source, &fixtures) {
            (MiningSource::Fixtures(_), Some(table)) => {
                let wanted = member_set(members);
                let entry = table
                    .iter()
                    .find(|f| member_set(&f.members) == wanted)
                    .ok_or_else(|| MinerError::MissingFixture(format!("cluster {members:?}")))?;
                parse_super_name(&entry.response).ok_or_else(|| MinerError::UnparseableResponse {
                    reason: format!("empty fixture response for {members:?}"),
                    archived: None,
                })?
            }
            (
                MiningSource::Online {
                    endpoint,
                    archive_dir,
                },
                _,
            ) => online_exchange(
                "super_names",
                endpoint,
                archive_dir,
                &super_name_prompt_text(members),
                transport,
                parse_super_name,
            )?,
            _ => unreachable!("fixture table is loaded for fixture sources"),
        };
        let words = name.split_whitespace().count();
        if !(1..=3).contains(&words) {
            warnings.push(format!("{name:?} has {words} words"));
        }
        names.push(name);
    }
    Ok(SuperNames { names, warnings })
}
