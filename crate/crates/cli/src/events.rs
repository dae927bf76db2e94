//! JSON-lines renderings of pipeline events and cache digests.

use serde_json::{json, Map, Value};
use streamdiff_core::kv_cache::FrameDigest;
use streamdiff_core::pipeline::StreamEvent;

pub fn event_json(e: &StreamEvent) -> Value {
    let mut m = Map::new();
    m.insert("kind".into(), json!(e.kind.as_str()));
    m.insert("pass".into(), json!(e.pass));
    if let Some(o) = e.ordinal {
        m.insert("ordinal".into(), json!(o));
    }
    m.insert("frame_ids".into(), json!(e.frame_ids));
    if !e.timesteps.is_empty() {
        let ts: Vec<Value> = e
            .timesteps
            .iter()
            .map(|&(ordinal, from, to)| json!({"ordinal": ordinal, "t": from, "t_next": to}))
            .collect();
        m.insert("timesteps".into(), Value::Array(ts));
    }
    if let Some(epoch) = e.epoch {
        m.insert("epoch".into(), json!(epoch));
    }
    Value::Object(m)
}

pub fn digest_json(d: &FrameDigest) -> Value {
    json!({
        "frame_id": d.frame_id,
        "is_sink": d.is_sink,
        "checksum": format!("{:016x}", d.checksum),
    })
}
