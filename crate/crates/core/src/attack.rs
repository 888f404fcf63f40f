//! False data injection on the wire view of a compromised agent.

use crate::error::{Error, Result};
use crate::kernel::{NegotiationMessage, Payload};
use crate::model::{AgentId, AttackConfig, AttackMode, Schedule};

/// Falsified version of one schedule under `config`.
pub fn falsify(values: &Schedule, config: &AttackConfig) -> Result<Schedule> {
    Ok(match config.mode {
        AttackMode::Scale => Schedule(values.values().iter().map(|v| v * config.scale_factor).collect()),
        AttackMode::Offset => Schedule(values.values().iter().map(|v| v + config.offset_kw).collect()),
        AttackMode::Replace => config
            .replacement
            .clone()
            .ok_or_else(|| Error::InvalidConfig("replace attack without a replacement schedule".into()))?,
    })
}

/// Rewrites the sender's own power values inside a payload. Control payloads
/// carry no power values and pass through.
pub fn tamper_payload(payload: &mut Payload, sender: AgentId, config: &AttackConfig, interval: u32) -> Result<()> {
    if config.mode == AttackMode::Replace && config.replacement.is_none() {
        return Err(Error::InvalidConfig("replace attack without a replacement schedule".into()));
    }
    if interval < config.active_from_interval {
        return Ok(());
    }
    let Payload::Memory(mem) = payload else {
        return Ok(());
    };
    if let Some(e) = mem.entries.get_mut(&sender) {
        e.schedule = falsify(&e.schedule, config)?;
    }
    if let Some(c) = &mut mem.best_candidate {
        if let Some(e) = c.assignment.get_mut(&sender) {
            e.schedule = falsify(&e.schedule, config)?;
        }
    }
    Ok(())
}

/// Wire view of a message sent by a compromised agent. Metadata is never
/// touched.
pub fn tamper(message: &NegotiationMessage, config: &AttackConfig, current_interval: u32) -> Result<NegotiationMessage> {
    let mut out = message.clone();
    if let Some(sender) = message.sender.agent() {
        tamper_payload(&mut out.content, sender, config, current_interval)?;
    }
    Ok(out)
}
