//! Session ingestion, load aggregation, standardization, windowing and the
//! source/target station protocol.

mod aggregate;
mod prepare;
mod scaler;
mod series;
mod sessions;
mod split;
pub mod synth;
pub mod time;
mod window;

pub use aggregate::aggregate_load;
pub use prepare::{prepare_windows, PreparedData, WindowConfig};
pub use scaler::{Scaler, MIN_STD};
pub use series::{read_series_csv, write_series_csv, LoadSeries, DEFAULT_GRANULARITY, LOAD_CHANNEL, NUM_CHANNELS};
pub use sessions::{parse_sessions, ColumnMap, ParsedSessions, RowWarning, SessionRecord};
pub use split::{split_stations, SplitSeries, StationSplit};
pub use synth::{synth_generate, SynthConfig};
pub use window::{make_windows, window_offsets, Window, WindowDataset};
