pub mod dip_reference;
