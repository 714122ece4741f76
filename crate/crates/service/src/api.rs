use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use markmatch_core::retrieval::RankedMatch;
use markmatch_core::segmentation::{rle, segment, SegmentPrompt};
use markmatch_core::{Error, GrayImage};

use crate::state::{AppState, BallotRecord, SegmentEntry};

/// Largest accepted request body (ballot scans).
const BODY_LIMIT: usize = 64 << 20;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id:?}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::Parse { .. } | Error::Version { .. } => StatusCode::BAD_REQUEST,
            Error::NoMarkFound => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Conflict(_) | Error::State(_) => StatusCode::CONFLICT,
            Error::Training { .. } | Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/ballots", post(upload_ballot))
        .route("/api/ballots/{id}/segments", post(create_segment))
        .route("/api/segments/{id}/crop", get(segment_crop))
        .route("/api/pool", post(enroll).get(list_pool))
        .route("/api/query", post(query))
        .route("/api/heatmap", get(heatmap))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

fn decode_image(bytes: &[u8]) -> Option<GrayImage> {
    if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        return GrayImage::from_pgm(bytes).ok().filter(|g| !g.is_empty());
    }
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).ok()?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::from_u8(w as usize, h as usize, luma.as_raw())
        .ok()
        .filter(|g| !g.is_empty())
}

#[derive(Serialize)]
struct BallotCreated {
    ballot_id: String,
}

async fn upload_ballot(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<BallotCreated>> {
    let image = decode_image(&body)
        .ok_or_else(|| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "body is not a decodable PGM or PNG image"))?;
    let mut inner = state.write();
    let ballot_id = format!("ballot-{}", inner.next_ballot);
    inner.next_ballot += 1;
    inner.ballots.insert(
        ballot_id.clone(),
        BallotRecord {
            ballot_id: ballot_id.clone(),
            image: Arc::new(image),
            segments: Vec::new(),
        },
    );
    Ok(Json(BallotCreated { ballot_id }))
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum PromptBody {
    Point { x: usize, y: usize },
    Box { x0: usize, y0: usize, x1: usize, y1: usize },
}

impl From<PromptBody> for SegmentPrompt {
    fn from(p: PromptBody) -> Self {
        match p {
            PromptBody::Point { x, y } => SegmentPrompt::Point { x, y },
            PromptBody::Box { x0, y0, x1, y1 } => SegmentPrompt::Box { x0, y0, x1, y1 },
        }
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBoxJson {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Serialize)]
struct SegmentCreated {
    segment_id: String,
    bbox: BBoxJson,
    rle_mask: String,
}

async fn create_segment(
    State(state): State<Arc<AppState>>,
    Path(ballot_id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SegmentCreated>> {
    let image = state
        .read()
        .ballots
        .get(&ballot_id)
        .map(|b| b.image.clone())
        .ok_or_else(|| ApiError::not_found("ballot", &ballot_id))?;
    let prompt: SegmentPrompt = parse_body::<PromptBody>(&body)?.into();
    let seg = segment(&image, prompt, &ballot_id, &state.config.segment)?;
    let embedding = state.params.embed(&seg.crop)?;
    let bbox = BBoxJson {
        x0: seg.bbox.x0,
        y0: seg.bbox.y0,
        x1: seg.bbox.x1,
        y1: seg.bbox.y1,
    };
    let rle_mask = rle::encode(&seg.mask);

    let mut inner = state.write();
    let segment_id = format!("seg-{}", inner.next_segment);
    inner.next_segment += 1;
    if let Some(b) = inner.ballots.get_mut(&ballot_id) {
        b.segments.push(segment_id.clone());
    }
    inner.segments.insert(
        segment_id.clone(),
        SegmentEntry {
            ballot_id,
            segment: seg,
            embedding,
            alias: None,
        },
    );
    Ok(Json(SegmentCreated {
        segment_id,
        bbox,
        rle_mask,
    }))
}

async fn segment_crop(
    State(state): State<Arc<AppState>>,
    Path(segment_id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let crop = state
        .read()
        .segments
        .get(&segment_id)
        .map(|s| s.segment.crop.image.clone())
        .ok_or_else(|| ApiError::not_found("segment", &segment_id))?;
    match params.get("format").map(String::as_str) {
        None | Some("pgm") => Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], crop.to_pgm()).into_response()),
        Some("png") => {
            let buf = image::GrayImage::from_raw(crop.width() as u32, crop.height() as u32, crop.to_u8())
                .expect("buffer sized from the crop");
            let mut out = std::io::Cursor::new(Vec::new());
            buf.write_to(&mut out, image::ImageFormat::Png)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            Ok(([(header::CONTENT_TYPE, "image/png")], out.into_inner()).into_response())
        }
        Some(other) => Err(ApiError::bad_request(format!("unknown format {other:?}"))),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnrollBody {
    segment_id: String,
}

#[derive(Serialize)]
struct Enrolled {
    alias: String,
}

async fn enroll(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Enrolled>> {
    let req: EnrollBody = parse_body(&body)?;
    let mut inner = state.write();
    let entry = inner
        .segments
        .get(&req.segment_id)
        .ok_or_else(|| ApiError::not_found("segment", &req.segment_id))?;
    if let Some(alias) = &entry.alias {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("segment {} is already enrolled as {alias}", req.segment_id),
        ));
    }
    // the same mark segmented twice counts as a duplicate too
    if let Some(alias) = inner
        .segments
        .values()
        .filter(|s| s.ballot_id == entry.ballot_id && s.segment.mask == entry.segment.mask)
        .find_map(|s| s.alias.as_ref())
    {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("this mark is already enrolled as {alias}"),
        ));
    }
    let (ballot_id, embedding) = (entry.ballot_id.clone(), entry.embedding.clone());
    // mark index counts enrollments, not segmentation order
    let mark_index = inner.pool.marks_for_ballot(&ballot_id);
    let mut next = inner.pool.clone();
    let alias = next.enroll(embedding, &ballot_id, mark_index)?;
    if let Some(path) = &state.config.pool_path {
        next.save(path)?;
    }
    inner.pool = next;
    if let Some(entry) = inner.segments.get_mut(&req.segment_id) {
        entry.alias = Some(alias.clone());
    }
    Ok(Json(Enrolled { alias }))
}

#[derive(Serialize)]
struct PoolEntry {
    alias: String,
    ballot_id: String,
}

async fn list_pool(State(state): State<Arc<AppState>>) -> Json<Vec<PoolEntry>> {
    Json(
        state
            .read()
            .pool
            .records()
            .iter()
            .map(|r| PoolEntry {
                alias: r.alias.clone(),
                ballot_id: r.ballot_id.clone(),
            })
            .collect(),
    )
}

fn default_k() -> usize {
    5
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    segment_id: String,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default)]
    exclude_same_ballot: bool,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct MatchJson {
    pub rank: usize,
    pub alias: String,
    pub softmax_score: f64,
    pub raw_logit: f64,
}

impl From<RankedMatch> for MatchJson {
    fn from(m: RankedMatch) -> Self {
        MatchJson {
            rank: m.rank,
            alias: m.alias,
            softmax_score: m.softmax_score,
            raw_logit: m.raw_logit,
        }
    }
}

#[derive(Serialize)]
struct QueryReply {
    matches: Vec<MatchJson>,
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<QueryReply>> {
    let req: QueryBody = parse_body(&body)?;
    let inner = state.read();
    let entry = inner
        .segments
        .get(&req.segment_id)
        .ok_or_else(|| ApiError::not_found("segment", &req.segment_id))?;
    if inner.pool.is_empty() {
        return Err(ApiError::new(StatusCode::CONFLICT, "pool is empty"));
    }
    let loss = &state.config.loss;
    let matches = if req.exclude_same_ballot {
        inner
            .pool
            .query_filtered(&entry.embedding, req.k, loss, |r| r.ballot_id != entry.ballot_id)?
    } else {
        inner.pool.query(&entry.embedding, req.k, loss)?
    };
    Ok(Json(QueryReply {
        matches: matches.into_iter().map(MatchJson::from).collect(),
    }))
}

#[derive(Serialize)]
struct HeatmapReply {
    pool_aliases: Vec<String>,
    query_aliases: Vec<String>,
    cells: Vec<Vec<f64>>,
}

async fn heatmap(
    State(state): State<Arc<AppState>>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Json<HeatmapReply>> {
    let ids: Vec<&str> = params
        .get("queries")
        .map(|q| q.split(',').map(str::trim).filter(|s| !s.is_empty()).collect())
        .unwrap_or_default();
    if ids.is_empty() {
        return Err(ApiError::bad_request("queries must list at least one segment id"));
    }
    let inner = state.read();
    if inner.pool.is_empty() {
        return Err(ApiError::new(StatusCode::CONFLICT, "pool is empty"));
    }
    let mut queries = Vec::with_capacity(ids.len());
    for id in &ids {
        let entry = inner.segments.get(*id).ok_or_else(|| ApiError::not_found("segment", id))?;
        // enrolled segments are labelled by alias, others by segment id
        let label = entry.alias.as_deref().unwrap_or(id);
        queries.push((label, &entry.embedding));
    }
    let h = inner.pool.heatmap(&queries, &state.config.loss)?;
    Ok(Json(HeatmapReply {
        pool_aliases: h.pool_aliases,
        query_aliases: h.query_aliases,
        cells: h.cells,
    }))
}
