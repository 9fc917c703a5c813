//! Demand ingestion, binning, normalization and windowing.

pub mod ingest;
pub mod io;
pub mod normalize;
pub mod registry;
pub mod tensor;
pub mod window;

pub use ingest::{
    bin_demand, filter_low_demand, ingest_counts, load_trips, parse_timestamp, CountColumns, DropCounts,
    TripColumns, TripRecord, TripTable,
};
pub use io::DemandData;
pub use normalize::{denormalize, fit_normalize, NormStats};
pub use registry::{LatLon, Location, NodeInfo, NodeRegistry};
pub use tensor::{DemandTensor, StudyWindow, CHANNELS, INFLOW, OUTFLOW};
pub use window::{window_split, Batch, Split, SplitFractions, WindowedDataset};
