//! Input side of the pipeline: record parsing, prefix-to-AS mapping and
//! time binning.

mod prefix;
mod record;
mod timebin;

pub use prefix::{Asn, Prefix, PrefixError, PrefixTable, PrefixTableError};
pub use record::{
    parse_record, parse_records, Hop, IngestError, ParsedRecords, RecordError, RecordReader,
    TracerouteRecord,
};
pub use timebin::{BinConfig, BinWidthError, TimeBin, DEFAULT_BIN_WIDTH};
