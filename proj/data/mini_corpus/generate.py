"""Writes the synthetic mini-corpus bundle used by the examples and tests.

Descriptions are short and synthetic. Each leans on the vocabulary of one
kill-chain phase so that anchor-based phase assignment is unambiguous with
TF-IDF embeddings.
"""

import json
import pathlib
import uuid

HERE = pathlib.Path(__file__).resolve().parent

# (technique id, name, description)
TECHNIQUES = [
    # Reconnaissance
    ("T1595", "Active Scanning", "Adversaries perform reconnaissance by scanning victim infrastructure to discover exposed hosts and a vulnerable server before the intrusion Each such step advances the intrusion campaign against the targeted organization network toward its next stage."),
    ("T1595.001", "Scanning IP Blocks", "Reconnaissance scanning of public IP blocks lets adversaries discover exposed hosts and gather victim information."),
    ("T1595.002", "Vulnerability Scanning", "Adversaries run vulnerability scanning during reconnaissance to discover a vulnerable webmail server or exposed service."),
    ("T1595.003", "Wordlist Scanning", "Wordlist scanning brute forces paths and subdomain names during reconnaissance to discover exposed content."),
    ("T1590", "Gather Victim Network Information", "Adversaries gather victim network information during reconnaissance, including DNS records and exposed server addresses."),
    ("T1590.002", "DNS", "Reconnaissance of DNS records and zone transfer responses reveals subdomain enumeration targets and victim hosts."),
    ("T1590.001", "Domain Properties", "Adversaries gather domain properties such as registrar data and subdomain enumeration results for reconnaissance."),
    ("T1590.005", "IP Addresses", "Reconnaissance of victim IP addresses helps adversaries discover exposed hosts and a vulnerable server."),
    ("T1593", "Search Open Websites/Domains", "Adversaries search open websites and domains for victim information gathering during reconnaissance."),
    ("T1593.001", "Social Media", "Social media reconnaissance exposes staff roles and victim information gathering opportunities."),
    # Weaponization
    ("T1587", "Develop Capabilities", "Adversaries develop capabilities and weaponize a payload, building a malicious document with a macro that carries an exploit Each such step advances the intrusion campaign against the targeted organization network toward its next stage."),
    ("T1587.001", "Malware", "Adversaries develop malware and weaponize it as a payload embedded in a malicious document."),
    ("T1587.004", "Exploits", "Adversaries develop exploit code for a known CVE and weaponize it into a payload for a malicious document."),
    ("T1587.002", "Code Signing Certificates", "Adversaries develop code signing certificates so a weaponized payload appears trusted."),
    ("T1588", "Obtain Capabilities", "Adversaries obtain capabilities such as a weaponized payload or builder instead of developing their own."),
    ("T1588.001", "Malware", "Adversaries obtain malware builders that weaponize a macro payload inside a Word document."),
    ("T1588.005", "Exploits", "Adversaries obtain a public exploit for a CVE and weaponize it with a VBA macro payload."),
    ("T1588.002", "Tool", "Adversaries obtain a tool that can weaponize a payload or build a malicious document with a macro."),
    ("T1608", "Stage Capabilities", "Adversaries stage capabilities by uploading a weaponized payload and malicious document to infrastructure they control."),
    ("T1608.001", "Upload Malware", "Adversaries upload malware and weaponized payload files so they can be retrieved later."),
    # Delivery
    ("T1566", "Phishing", "Adversaries deliver a phishing email with a malicious attachment or link to targeted staff as a lure Each such step advances the intrusion campaign against the targeted organization network toward its next stage."),
    ("T1566.001", "Spearphishing Attachment", "Adversaries send a spearphishing email with a malicious attachment delivered to finance staff as a lure."),
    ("T1566.002", "Spearphishing Link", "Adversaries send a spearphishing email containing a link that delivers the lure when recipients click."),
    ("T1566.003", "Spearphishing via Service", "Adversaries send spearphishing messages through a third party service to deliver a lure to recipients."),
    ("T1195", "Supply Chain Compromise", "Adversaries deliver malicious content by tampering with a supply chain so recipients install a trojanized update sent by a vendor."),
    ("T1195.001", "Compromise Software Dependencies and Development Tools", "Adversaries deliver malicious content through tampered software dependencies sent to recipients."),
    ("T1195.002", "Compromise Software Supply Chain", "Adversaries deliver a tampered software update sent through the supply chain to recipients."),
    ("T1195.003", "Compromise Hardware Supply Chain", "Adversaries deliver tampered hardware through the supply chain so recipients receive a compromised device."),
    ("T1189", "Drive-by Compromise", "Adversaries deliver malicious content when recipients browse a compromised website that sends a lure."),
    ("T1189.001", "Watering Hole", "Adversaries deliver a lure by compromising a website frequented by targeted staff."),
    # Exploitation
    ("T1059", "Command and Scripting Interpreter", "Adversaries execute commands and scripts through an interpreter during exploitation, for example PowerShell executed silently."),
    ("T1059.001", "PowerShell", "Adversaries execute PowerShell scripts during exploitation, often executed silently after a user runs a file."),
    ("T1059.005", "Visual Basic", "Adversaries execute Visual Basic scripts during exploitation when a user opens a file and the code runs."),
    ("T1059.003", "Windows Command Shell", "Adversaries execute commands with the Windows command shell during exploitation of a host."),
    ("T1204", "User Execution", "Exploitation relies on a user opening a malicious file or link so that code is executed Each such step advances the intrusion campaign against the targeted organization network toward its next stage."),
    ("T1204.001", "Malicious Link", "Exploitation occurs when a user opens a malicious link and code is executed in the browser."),
    ("T1204.002", "Malicious File", "Exploitation occurs when a user opening a malicious file causes embedded code to be executed."),
    ("T1204.003", "Malicious Image", "Exploitation occurs when a user runs a malicious image and code is executed on the host."),
    ("T1203", "Exploitation for Client Execution", "Adversaries exploit software vulnerabilities in client applications to execute code during exploitation."),
    ("T1203.001", "Document Reader Exploitation", "Exploitation of document reader flaws executes code when the user opens the file."),
    # Installation
    ("T1547", "Boot or Logon Autostart Execution", "Adversaries install an implant with persistence through autostart locations so the trojan survives reboot."),
    ("T1547.001", "Registry Run Keys / Startup Folder", "Adversaries install persistence through registry run keys so an implant starts at logon."),
    ("T1547.004", "Winlogon Helper DLL", "Adversaries install a Winlogon helper DLL implant for persistence on the host."),
    ("T1547.009", "Shortcut Modification", "Adversaries install persistence by modifying shortcuts that launch an implant."),
    ("T1055", "Process Injection", "Adversaries install an implant by injecting code into processes for persistence and escalated privileges Each such step advances the intrusion campaign against the targeted organization network toward its next stage."),
    ("T1055.012", "Process Hollowing", "Process hollowing lets adversaries install a trojan implant inside a legitimate process with persistence."),
    ("T1055.001", "Dynamic-link Library Injection", "Adversaries install an implant by injecting a DLL into a process for persistence."),
    ("T1055.002", "Portable Executable Injection", "Adversaries install an implant by injecting a portable executable into a process for persistence."),
    ("T1548", "Abuse Elevation Control Mechanism", "Adversaries escalate privileges by abusing elevation controls while they install an implant."),
    ("T1548.002", "Bypass User Account Control", "Adversaries bypass user account control to escalate privileges and install persistence."),
    # Command and Control
    ("T1071", "Application Layer Protocol", "Adversaries keep command and control over application layer protocols so the implant beacons to a C2 server."),
    ("T1071.001", "Web Protocols", "Command and control traffic over web protocols lets an implant beacon to a C2 server hosted in the cloud."),
    ("T1071.004", "DNS", "Command and control over DNS lets an implant beacon to a C2 server through a covert channel."),
    ("T1071.002", "File Transfer Protocols", "Command and control over file transfer protocols hides the C2 channel in routine traffic."),
    ("T1219", "Remote Access Software", "Adversaries use remote access software for command and control, connected to a C2 server hosted on cloud infrastructure Each such step advances the intrusion campaign against the targeted organization network toward its next stage."),
    ("T1219.001", "IDE Tunneling", "Adversaries tunnel command and control through development environments to keep remote access to the C2 server."),
    ("T1219.002", "Remote Desktop Software", "Remote desktop software gives adversaries remote access and a command and control channel to hosts."),
    ("T1219.003", "Remote Access Hardware", "Remote access hardware gives adversaries a command and control channel connected outside the network."),
    ("T1090", "Proxy", "Adversaries route command and control traffic through a proxy so the C2 server hosted in the cloud stays hidden."),
    ("T1090.002", "External Proxy", "An external proxy relays command and control traffic between the implant and the C2 server."),
    # Actions on Objectives
    ("T1048", "Exfiltration Over Alternative Protocol", "Adversaries exfiltrate sensitive data over an alternative protocol such as encrypted SFTP to reach their objectives."),
    ("T1048.002", "Exfiltration Over Asymmetric Encrypted Non-C2 Protocol", "Adversaries exfiltrate sensitive financial data over an encrypted protocol separate from the C2 channel."),
    ("T1048.003", "Exfiltration Over Unencrypted Non-C2 Protocol", "Adversaries exfiltrate sensitive data over an unencrypted protocol to complete their objectives."),
    ("T1048.001", "Exfiltration Over Symmetric Encrypted Non-C2 Protocol", "Adversaries exfiltrate sensitive data over a symmetric encrypted protocol toward their objectives."),
    ("T1021", "Remote Services", "Adversaries move laterally with stolen credentials through remote services such as SMB to reach their objectives Each such step advances the intrusion campaign against the targeted organization network toward its next stage."),
    ("T1021.002", "SMB/Windows Admin Shares", "Adversaries move laterally over SMB admin shares using stolen credentials."),
    ("T1021.001", "Remote Desktop Protocol", "Adversaries move laterally with stolen credentials over the remote desktop protocol."),
    ("T1021.004", "SSH", "Adversaries move laterally over SSH with stolen credentials toward sensitive data."),
    ("T1110", "Brute Force", "Adversaries brute force credentials and crack password hashes to reach sensitive data and objectives."),
    ("T1110.002", "Password Cracking", "Adversaries crack password hashes offline to recover stolen credentials."),
]

ANCHORS = {
    "Reconnaissance": "reconnaissance scanning enumeration subdomain DNS zone transfers discover vulnerable exposed webmail server victim information gathering",
    "Weaponization": "weaponize weaponized payload malicious document Word macro VBA exploit CVE develop capabilities builder",
    "Delivery": "deliver delivered phishing email attachment link send recipients staff finance lure",
    "Exploitation": "exploitation execute executed PowerShell script interpreter user opening runs code silently",
    "Installation": "install installing trojan RAT implant persistence autostart escalate escalated privileges",
    "CommandAndControl": "command and control C2 server beacon remote access connected hosted cloud instance channel established proxy",
    "ActionsOnObjectives": "objectives exfiltrate exfiltrated sensitive financial data laterally moved stolen SMB credentials password encrypted SFTP",
}


def stix_id(technique_id):
    return "attack-pattern--" + str(uuid.uuid5(uuid.NAMESPACE_URL, "killchain-mini/" + technique_id))


def main():
    objects = [{"type": "identity", "spec_version": "2.1", "id": "identity--" + str(uuid.uuid5(uuid.NAMESPACE_URL, "killchain-mini")), "name": "killchain mini corpus"}]
    for tid, name, desc in TECHNIQUES:
        objects.append({
            "type": "attack-pattern",
            "spec_version": "2.1",
            "id": stix_id(tid),
            "name": name,
            "description": desc,
            "x_mitre_is_subtechnique": "." in tid,
            "external_references": [{"source_name": "mitre-attack", "external_id": tid}],
        })
    bundle = {"type": "bundle", "id": "bundle--" + str(uuid.uuid5(uuid.NAMESPACE_URL, "killchain-mini-bundle")), "objects": objects}
    (HERE / "bundle.json").write_text(json.dumps(bundle, indent=2) + "\n")
    (HERE / "anchors.json").write_text(json.dumps(ANCHORS, indent=2) + "\n")


if __name__ == "__main__":
    main()
