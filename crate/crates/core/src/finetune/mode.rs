use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Update method of one fine-tuning stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageUpdate {
    LP,
    FT,
}

impl StageUpdate {
    fn as_mode(self) -> UpdateMode {
        match self {
            StageUpdate::LP => UpdateMode::LP,
            StageUpdate::FT => UpdateMode::FT,
        }
    }
}

/// Which parameters fine-tuning updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpdateMode {
    /// Linear probing: classifier only.
    LP,
    /// Full fine-tuning: every parameter.
    FT,
    /// Classifier plus the last `d` blocks.
    Partial(usize),
    /// `first` for epochs `1..=switch_epoch`, `second` afterwards.
    TwoStage {
        first: StageUpdate,
        second: StageUpdate,
        switch_epoch: usize,
    },
}

impl UpdateMode {
    /// Mode in effect at 1-indexed `epoch`.
    pub fn at_epoch(self, epoch: usize) -> UpdateMode {
        match self {
            UpdateMode::TwoStage {
                first,
                second,
                switch_epoch,
            } => {
                if epoch <= switch_epoch {
                    first.as_mode()
                } else {
                    second.as_mode()
                }
            }
            m => m,
        }
    }

    pub fn validate(self, epochs: usize) -> Result<()> {
        if let UpdateMode::TwoStage {
            first,
            second,
            switch_epoch,
        } = self
        {
            if first == second {
                return Err(Error::invalid("two-stage update needs two different methods"));
            }
            if switch_epoch == 0 || switch_epoch >= epochs {
                return Err(Error::invalid(format!(
                    "two-stage switch epoch {switch_epoch} must lie in (0, {epochs})"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateMode::LP => f.write_str("LP"),
            UpdateMode::FT => f.write_str("FT"),
            UpdateMode::Partial(d) => write!(f, "Partial-{d}"),
            UpdateMode::TwoStage {
                first,
                second,
                switch_epoch,
            } => write!(f, "{first:?}-{second:?}@{switch_epoch}"),
        }
    }
}

fn parse_stage(s: &str) -> Result<StageUpdate> {
    match s.trim().to_ascii_uppercase().as_str() {
        "LP" => Ok(StageUpdate::LP),
        "FT" => Ok(StageUpdate::FT),
        _ => Err(Error::config(format!("two-stage parts must be LP or FT, got {s:?}"))),
    }
}

impl FromStr for UpdateMode {
    type Err = Error;

    /// Accepts `LP`, `FT`, `Partial-d` and `LP-FT@e` / `FT-LP@e`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let upper = t.to_ascii_uppercase();
        match upper.as_str() {
            "LP" => return Ok(UpdateMode::LP),
            "FT" => return Ok(UpdateMode::FT),
            _ => {}
        }
        if let Some(d) = upper.strip_prefix("PARTIAL") {
            let d = d.trim_start_matches(['-', ':', '(']).trim_end_matches(')');
            return d
                .parse()
                .map(UpdateMode::Partial)
                .map_err(|_| Error::config(format!("bad partial depth in {t:?}")));
        }
        if let Some((stages, epoch)) = upper.split_once('@') {
            let (a, b) = stages
                .split_once(['-', '>'])
                .ok_or_else(|| Error::config(format!("bad two-stage mode {t:?}")))?;
            let switch_epoch = epoch
                .parse()
                .map_err(|_| Error::config(format!("bad switch epoch in {t:?}")))?;
            return Ok(UpdateMode::TwoStage {
                first: parse_stage(a)?,
                second: parse_stage(b.trim_start_matches('>'))?,
                switch_epoch,
            });
        }
        Err(Error::config(format!(
            "unknown update mode {t:?} (LP, FT, Partial-d, LP-FT@e)"
        )))
    }
}
