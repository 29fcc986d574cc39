//! Operator-console wire protocol and recorded sessions.
//!
//! Messages are JSON objects, one per line (or one per WebSocket text
//! message), each with a `type` tag and a `seq` number that increases per
//! sender:
//!
//! ```text
//! {"type":"frame","seq":7,"side":"left","sample":92,"capture":42,"png":"<base64>"}
//! {"type":"state","seq":8,"sample":42,"delay":1.0,"sarpd":true,"source":"live",
//!  "alpha":[0.0],"tracker_error":[0.0001],"overlay_tip":[[..]],"feedback_tip":[[..]],"malformed":0}
//! {"type":"input","seq":3,"dx":0.01,"dy":0.0,"dz":0.0,"engaged":true}
//! {"type":"control","seq":4,"delay":1.0}
//! ```
//!
//! `frame` and `state` flow from the server; `input` and `control` from the
//! console. Input displacements are master meters; `orientation` is an
//! optional absolute master quaternion `{w, x, y, z}`.
//!
//! A recorded session is the list of applied console messages, each tagged
//! with the sample boundary at which it took effect, plus the run length.
//! Replaying it through [`replay`] reproduces the metrics of the live run.

use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::camera::Frame;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::overlay::CameraSide;
use crate::se3::{Quaternion, Vec3};
use crate::sim::{MasterInput, MasterSource, MetricsRow, SimControl, Simulation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireMessage {
    Frame {
        seq: u64,
        side: CameraSide,
        /// Sample at which the frame was displayed.
        sample: u64,
        /// Sample at which the slave captured it.
        capture: Option<u64>,
        /// Base64 PNG, RGBA8.
        png: String,
    },
    State {
        seq: u64,
        sample: u64,
        /// Round-trip delay, seconds.
        delay: f64,
        /// Predictive overlay enabled.
        sarpd: bool,
        source: MasterSource,
        /// Per arm.
        alpha: Vec<f64>,
        /// Per arm: translation error of the overlay hand-eye, meters.
        tracker_error: Vec<f64>,
        /// Per arm: predicted tool position (base frame, meters).
        overlay_tip: Vec<[f64; 3]>,
        /// Per arm: delayed slave tool position seen by the master.
        feedback_tip: Vec<[f64; 3]>,
        /// Console messages dropped so far.
        malformed: u64,
    },
    Input {
        seq: u64,
        #[serde(default)]
        arm: usize,
        dx: f64,
        dy: f64,
        dz: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        orientation: Option<Quaternion>,
        engaged: bool,
    },
    Control {
        seq: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delay: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sarpd: Option<bool>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<MasterSource>,
    },
}

impl WireMessage {
    pub fn seq(&self) -> u64 {
        match self {
            WireMessage::Frame { seq, .. }
            | WireMessage::State { seq, .. }
            | WireMessage::Input { seq, .. }
            | WireMessage::Control { seq, .. } => *seq,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::Frame { .. } => "frame",
            WireMessage::State { .. } => "state",
            WireMessage::Input { .. } => "input",
            WireMessage::Control { .. } => "control",
        }
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim()).map_err(|e| Error::InvalidArgument(format!("malformed message: {e}")))
    }

    /// Single-line JSON.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    pub fn frame(seq: u64, side: CameraSide, sample: u64, capture: Option<u64>, frame: &Frame) -> Result<Self> {
        Ok(WireMessage::Frame {
            seq,
            side,
            sample,
            capture,
            png: base64::engine::general_purpose::STANDARD.encode(frame.encode_png()?),
        })
    }

    /// Decodes the PNG of a `frame` message.
    pub fn decode_frame(&self) -> Result<Frame> {
        match self {
            WireMessage::Frame { png, .. } => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(png)
                    .map_err(|e| Error::InvalidArgument(format!("frame payload: {e}")))?;
                Frame::decode_png(bytes.as_slice())
            }
            _ => Err(Error::InvalidArgument(format!("{} message carries no frame", self.kind()))),
        }
    }

    /// True for messages a console may send.
    pub fn is_console_message(&self) -> bool {
        matches!(self, WireMessage::Input { .. } | WireMessage::Control { .. })
    }
}

/// Applies a console message to the simulation. Server-side messages are rejected.
pub fn apply(sim: &mut Simulation, msg: &WireMessage) -> Result<()> {
    match msg {
        WireMessage::Input {
            arm,
            dx,
            dy,
            dz,
            orientation,
            engaged,
            ..
        } => sim.input(&MasterInput {
            arm: *arm,
            delta: Vec3::new(*dx, *dy, *dz),
            orientation: *orientation,
            engaged: *engaged,
        }),
        WireMessage::Control {
            delay, sarpd, source, ..
        } => {
            if let Some(d) = delay {
                // validate before touching anything
                crate::delay::DelayParams::new(sim.delay().sample_rate, *d)?;
            }
            if let Some(d) = delay {
                sim.control(SimControl::SetDelay(*d))?;
            }
            if let Some(on) = sarpd {
                sim.control(SimControl::SetOverlay(*on))?;
            }
            if let Some(src) = source {
                sim.control(SimControl::SetSource(*src))?;
            }
            Ok(())
        }
        other => Err(Error::InvalidArgument(format!("{} messages are server-to-console only", other.kind()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    /// Applied before this sample was stepped.
    pub sample: u64,
    pub message: WireMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionHeader {
    telelens_session: u32,
    /// Samples stepped by the live run.
    samples: u64,
    /// Master source at start.
    source: MasterSource,
}

/// Console messages of a live run in application order.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub samples: u64,
    pub initial_source: MasterSource,
    pub entries: Vec<SessionEntry>,
}

impl SessionLog {
    /// NDJSON: a header line, then one entry per line.
    pub fn to_ndjson(&self) -> String {
        let mut s = serde_json::to_string(&SessionHeader {
            telelens_session: 1,
            samples: self.samples,
            source: self.initial_source,
        })
        .expect("header serializes");
        s.push('\n');
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("entry serializes"));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (i, head) = lines.next().ok_or_else(|| err(1, "empty session file".into()))?;
        let header: SessionHeader = serde_json::from_str(head).map_err(|e| err(i + 1, e.to_string()))?;
        if header.telelens_session != 1 {
            return Err(err(i + 1, format!("unsupported session version {}", header.telelens_session)));
        }
        let mut entries = Vec::new();
        let mut last = 0;
        for (i, line) in lines {
            let e: SessionEntry = serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
            if !e.message.is_console_message() {
                return Err(err(i + 1, format!("{} message in a session log", e.message.kind())));
            }
            if e.sample < last || e.sample > header.samples {
                return Err(err(i + 1, format!("sample {} out of order", e.sample)));
            }
            last = e.sample;
            entries.push(e);
        }
        Ok(SessionLog {
            samples: header.samples,
            initial_source: header.source,
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ndjson())?;
        Ok(())
    }
}

/// Re-runs a recorded session without rendering and returns the finalized
/// metrics rows. Entries that failed live fail the same way here and are
/// skipped the same way.
pub fn replay(cfg: &Config, log: &SessionLog) -> Result<Vec<MetricsRow>> {
    let mut sim = Simulation::new(cfg)?;
    sim.control(SimControl::SetSource(log.initial_source))?;
    let mut rows = Vec::new();
    let mut entries = log.entries.iter().peekable();
    for n in 0..log.samples {
        while let Some(e) = entries.next_if(|e| e.sample == n) {
            let _ = apply(&mut sim, &e.message);
        }
        rows.extend(sim.step()?.rows);
    }
    sim.finalize(&mut rows);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_kinds() {
        let msgs = vec![
            WireMessage::frame(1, CameraSide::Right, 9, Some(3), &Frame::filled(4, 3, [1, 2, 3, 255])).unwrap(),
            WireMessage::State {
                seq: 2,
                sample: 9,
                delay: 1.0,
                sarpd: true,
                source: MasterSource::Live,
                alpha: vec![0.5],
                tracker_error: vec![1e-4],
                overlay_tip: vec![[0.0, 0.1, 0.2]],
                feedback_tip: vec![[0.0, 0.1, 0.3]],
                malformed: 0,
            },
            WireMessage::Input {
                seq: 3,
                arm: 0,
                dx: 0.01,
                dy: 0.0,
                dz: -0.002,
                orientation: Some(Quaternion::IDENTITY),
                engaged: true,
            },
            WireMessage::Control {
                seq: 4,
                delay: Some(0.5),
                sarpd: None,
                source: Some(MasterSource::Trajectory),
            },
        ];
        for m in msgs {
            let line = m.to_line();
            assert!(!line.contains('\n'));
            let v: serde_json::Value = serde_json::from_str(&line).unwrap();
            assert_eq!(v["type"], m.kind());
            assert_eq!(v["seq"], m.seq());
            assert_eq!(WireMessage::parse(&line).unwrap(), m);
        }
    }

    #[test]
    fn frame_payload_decodes() {
        let f = Frame::filled(5, 2, [9, 8, 7, 255]);
        let m = WireMessage::frame(0, CameraSide::Left, 0, None, &f).unwrap();
        let back = WireMessage::parse(&m.to_line()).unwrap().decode_frame().unwrap();
        assert_eq!(back.pixels, f.pixels);
    }

    #[test]
    fn malformed_messages_rejected() {
        for bad in [
            "",
            "not json",
            r#"{"seq":1,"dx":0}"#,
            r#"{"type":"input","seq":1,"dx":0,"dy":0,"dz":0}"#,
            r#"{"type":"input","seq":1,"dx":0,"dy":0,"dz":0,"engaged":true,"extra":1}"#,
            r#"{"type":"teleport","seq":1}"#,
            r#"{"type":"control","delay":1.0}"#,
        ] {
            assert!(WireMessage::parse(bad).is_err(), "{bad}");
        }
        let ok = WireMessage::parse(r#"{"type":"input","seq":1,"dx":0.01,"dy":0,"dz":0,"engaged":true}"#).unwrap();
        assert!(matches!(ok, WireMessage::Input { arm: 0, orientation: None, .. }));
    }

    #[test]
    fn server_messages_cannot_be_applied() {
        let mut sim = Simulation::new(&Config::default()).unwrap();
        let st = WireMessage::frame(0, CameraSide::Left, 0, None, &Frame::black(2, 2)).unwrap();
        assert!(apply(&mut sim, &st).is_err());
        let neg = WireMessage::Control {
            seq: 0,
            delay: Some(-1.0),
            sarpd: Some(false),
            source: None,
        };
        assert!(apply(&mut sim, &neg).is_err());
        assert!(sim.overlay_enabled(), "rejected control must not partially apply");
    }

    #[test]
    fn session_log_round_trip_and_diagnostics() {
        let log = SessionLog {
            samples: 30,
            initial_source: MasterSource::Live,
            entries: vec![
                SessionEntry {
                    sample: 2,
                    message: WireMessage::Control {
                        seq: 0,
                        delay: Some(0.2),
                        sarpd: None,
                        source: None,
                    },
                },
                SessionEntry {
                    sample: 5,
                    message: WireMessage::Input {
                        seq: 1,
                        arm: 0,
                        dx: 0.02,
                        dy: 0.0,
                        dz: 0.0,
                        orientation: None,
                        engaged: true,
                    },
                },
            ],
        };
        let text = log.to_ndjson();
        assert_eq!(SessionLog::parse(&text, "s").unwrap(), log);
        let bad = text.replace("\"sample\":5", "\"sample\":1");
        match SessionLog::parse(&bad, "s.ndjson") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(SessionLog::parse("", "s").is_err());
    }

    #[test]
    fn replay_is_deterministic() {
        let mut cfg = Config::default();
        cfg.delay.round_trip = 0.2;
        let log = SessionLog {
            samples: 80,
            initial_source: MasterSource::Live,
            entries: vec![SessionEntry {
                sample: 10,
                message: WireMessage::Input {
                    seq: 0,
                    arm: 0,
                    dx: 0.03,
                    dy: -0.01,
                    dz: 0.0,
                    orientation: None,
                    engaged: true,
                },
            }],
        };
        let a = crate::sim::metrics_csv(&replay(&cfg, &log).unwrap());
        let b = crate::sim::metrics_csv(&replay(&cfg, &log).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 81);
    }
}
