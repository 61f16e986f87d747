//! Deterministic synthetic benign corpus over the five monitored LOLBins:
//! PowerShell, cmd, msiexec, rundll32 and explorer. Stands in for real
//! telemetry in fixtures and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::ExecutionLog;

const HOSTS: &[&str] = &[
    "updates.contoso.com",
    "cdn.fabrikam.net",
    "files.example.org",
    "pkg.internal.lan",
    "mirror.adatum.com",
];

const USERS: &[&str] = &["alice", "bsmith", "svc_deploy", "jdoe", "operator7"];

const DIRS: &[&str] = &[
    r"C:\Windows\Temp",
    r"C:\Users\Public\Downloads",
    r"C:\ProgramData\Vendor",
    r"D:\builds\nightly",
    r"C:\Program Files\Common Files",
];

const DLLS: &[&str] = &[
    "shell32.dll",
    "printui.dll",
    "setupapi.dll",
    "ieframe.dll",
    "appwiz.cpl",
];

const DLL_ENTRIES: &[&str] = &[
    "Control_RunDLL",
    "PrintUIEntry",
    "InstallHinfSection",
    "OpenURL",
    "ShellExec_RunDLL",
];

const PS_VERBS: &[&str] = &[
    "Get-Process",
    "Get-Service",
    "Get-ChildItem",
    "Test-Connection",
    "Get-EventLog",
    "Start-Service",
];

fn guid(rng: &mut ChaCha8Rng) -> String {
    let mut hex = |n: usize| -> String {
        (0..n)
            .map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap().to_ascii_uppercase())
            .collect()
    };
    format!("{}-{}-{}-{}-{}", hex(8), hex(4), hex(4), hex(4), hex(12))
}

fn ip(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{}.{}.{}.{}",
        rng.gen_range(10..250),
        rng.gen_range(0..255),
        rng.gen_range(0..255),
        rng.gen_range(1..254)
    )
}

fn url(rng: &mut ChaCha8Rng) -> String {
    let host = HOSTS.choose(rng).unwrap();
    format!(
        "https://{host}/pkg/v{}/installer_{}.msi",
        rng.gen_range(1..9),
        rng.gen_range(100..9999)
    )
}

fn powershell(rng: &mut ChaCha8Rng) -> String {
    let verb = PS_VERBS.choose(rng).unwrap();
    match rng.gen_range(0..4) {
        0 => format!(
            "powershell.exe -NoProfile -Command {verb} -Name 'svc{}'",
            rng.gen_range(1..40)
        ),
        1 => format!(
            r"C:\Windows\System32\WindowsPowerShell\v1.0\powershell.exe -ExecutionPolicy Bypass -File {}\deploy_{}.ps1 -LogPath '{}\log_{}.txt'",
            DIRS.choose(rng).unwrap(),
            rng.gen_range(1..30),
            DIRS.choose(rng).unwrap(),
            rng.gen_range(1..99)
        ),
        2 => format!(
            "powershell.exe -Command \"{verb} | Out-File '{}\\report_{}.csv'\"",
            DIRS.choose(rng).unwrap(),
            rng.gen_range(1..50)
        ),
        _ => format!(
            "powershell.exe -NoLogo -Command Test-Connection {} -Count {}",
            ip(rng),
            rng.gen_range(1..9)
        ),
    }
}

fn cmd(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..5) {
        0 => format!(
            r"C:\WINDOWS\system32\cmd.exe /c dir {} /s /b",
            DIRS.choose(rng).unwrap()
        ),
        1 => format!(
            r"C:\WINDOWS\system32\cmd.exe /c tasklist.exe /fi imagename eq svc{}* /fi session eq {}",
            rng.gen_range(1..30),
            rng.gen_range(1..20)
        ),
        2 => format!(
            "cmd.exe /c ping {} -n {}",
            ip(rng),
            rng.gen_range(1..8)
        ),
        3 => format!(
            r"cmd.exe /c copy {}\build_{}.zip {}\archive",
            DIRS.choose(rng).unwrap(),
            rng.gen_range(100..999),
            DIRS.choose(rng).unwrap()
        ),
        _ => format!(
            r"C:\WINDOWS\system32\cmd.exe /c schtasks /query /tn Vendor\sync_{}",
            rng.gen_range(1..60)
        ),
    }
}

fn msiexec(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..3) {
        0 => format!("msiexec.exe /i {} /qn /norestart", url(rng)),
        1 => format!(
            r"C:\Windows\System32\msiexec.exe /x {{{}}} /quiet",
            guid(rng)
        ),
        _ => format!(
            r"msiexec.exe /i {}\setup_{}.msi REBOOT=ReallySuppress ALLUSERS={}",
            DIRS.choose(rng).unwrap(),
            rng.gen_range(100..999),
            rng.gen_range(1..3)
        ),
    }
}

fn rundll(rng: &mut ChaCha8Rng) -> String {
    let dll = DLLS.choose(rng).unwrap();
    let entry = DLL_ENTRIES.choose(rng).unwrap();
    match rng.gen_range(0..3) {
        0 => format!(r"rundll32.exe C:\Windows\System32\{dll},{entry}"),
        1 => format!(
            r"C:\Windows\System32\rundll32.exe {dll},{entry} {}\driver_{}.inf",
            DIRS.choose(rng).unwrap(),
            rng.gen_range(1..99)
        ),
        _ => format!(
            r"rundll32.exe shell32.dll,Control_RunDLL desk.cpl,,{}",
            rng.gen_range(0..5)
        ),
    }
}

fn explorer(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..3) {
        0 => format!(r"explorer.exe {}", DIRS.choose(rng).unwrap()),
        1 => format!(
            r"C:\Windows\explorer.exe /select,{}\report_{}.pdf",
            DIRS.choose(rng).unwrap(),
            rng.gen_range(1..99)
        ),
        _ => format!(
            r"explorer.exe C:\Users\{}\Documents",
            USERS.choose(rng).unwrap()
        ),
    }
}

/// Generates `n` deterministic benign execution logs across all five
/// binaries. Every line parses under `split_binary_and_args`.
pub fn synth_corpus(seed: u64, n: usize) -> Vec<ExecutionLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let raw = match i % 5 {
                0 => cmd(&mut rng),
                1 => powershell(&mut rng),
                2 => msiexec(&mut rng),
                3 => rundll(&mut rng),
                _ => explorer(&mut rng),
            };
            ExecutionLog::benign(raw, format!("synth-{seed}-{i}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obfugen::split_binary_and_args;

    #[test]
    fn deterministic() {
        let a = synth_corpus(7, 50);
        let b = synth_corpus(7, 50);
        assert_eq!(a, b);
    }

    #[test]
    fn all_lines_parse() {
        for log in synth_corpus(3, 300) {
            split_binary_and_args(&log).unwrap();
            assert!(!log.raw.trim().is_empty());
        }
    }

    #[test]
    fn all_binaries_present() {
        let corpus = synth_corpus(1, 100);
        for needle in ["powershell", "cmd", "msiexec", "rundll32", "explorer"] {
            assert!(
                corpus
                    .iter()
                    .any(|l| l.raw.to_ascii_lowercase().contains(needle)),
                "{needle} missing"
            );
        }
    }

    #[test]
    fn golden_first_lines() {
        let lines: Vec<String> = synth_corpus(42, 5).into_iter().map(|l| l.raw).collect();
        insta_check(&lines);
    }

    // Pinned output of the seeded generator; regenerate by printing
    // `synth_corpus(42, 5)` if the generator is intentionally changed.
    fn insta_check(lines: &[String]) {
        let golden: Vec<String> = GOLDEN_42_5.lines().map(|s| s.to_string()).collect();
        assert_eq!(lines, &golden[..]);
    }

    const GOLDEN_42_5: &str = include_str!("../tests/fixtures/synth_seed42_n5.txt");
}
